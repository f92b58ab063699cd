"""Command-line surface for the engine.

Commands: ingest | synth | concat | split | train | eval | report |
paramcount | gradcheck. Every run prints its resolved config and seed;
exit code 0 = success, 1 = validation error, 2 = runtime failure, with a
machine-readable JSON error line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .cohort import split_kfold, synth_cohort, FoldSplit
from .cohort_types import PatientRecord
from .errors import (
    AlignmentError,
    ConfigurationError,
    ContractError,
    DegenerateCohortError,
    DimensionError,
    IngestionError,
    MilsurvError,
    RegistryError,
    UndefinedMetricError,
)
from .features import concat_ensemble, load_manifest, read_features, write_features
from .heads import HEAD_KINDS, head_config, parameter_count
from .rng import Rng
from .survival import concordance_index, risk_score
from .training import (
    TrainConfig,
    emit_report,
    parse_report_csv,
    preset_config,
    run_cv,
)

_VALIDATION_ERRORS = (
    ConfigurationError,
    ContractError,
    DimensionError,
    IngestionError,
    RegistryError,
    AlignmentError,
    DegenerateCohortError,
    UndefinedMetricError,
)


def _out_root(value: str | None) -> Path:
    if value:
        return Path(value)
    return Path(os.environ.get("MILSURV_OUT", "."))


def _print_config(command: str, **kv) -> None:
    print(json.dumps({"command": command, **kv}, sort_keys=True, default=str))


def _parse_extractor_sets(values: list[str]) -> list[list[str]]:
    sets = []
    for v in values:
        parts = [p.strip() for p in v.split(",") if p.strip()]
        if not parts:
            raise ConfigurationError(f"empty extractor set in {v!r}")
        sets.append(parts)
    return sets


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="milsurv",
                                     description="WSI survival analysis engine")
    parser.add_argument("--version", action="version", version=f"milsurv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a manifest and its feature files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True, help="feature root directory")
    p.add_argument("--extractors", action="append", default=None,
                   help="comma-separated extractor ids (repeatable)")

    p = sub.add_parser("synth", help="generate a synthetic cohort with feature files")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--censor", type=float, default=0.45)
    p.add_argument("--signal", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("concat", help="materialize ensemble feature files")
    p.add_argument("--parts", required=True, help="comma-separated extractor ids, in order")
    p.add_argument("--in", dest="in_dir", required=True,
                   help="root holding one subdirectory per extractor")
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="stratified K-fold split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="K-fold cross-validated training grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--extractors", action="append", required=True,
                   help="one extractor set per flag, comma-separated within")
    p.add_argument("--head", action="append", required=True, choices=HEAD_KINDS)
    p.add_argument("--preset", choices=sorted(["blca", "luad", "brca"]), default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--earliest-stop", type=int, default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--dataset", default="cohort")
    p.add_argument("--out", default=None)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--extractors", required=True, help="comma-separated extractor set")
    p.add_argument("--split", default=None, help="fold split CSV to restrict scoring")
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("report", help="re-render a report CSV")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    p.add_argument("--out", required=True)

    p = sub.add_parser("paramcount", help="trainable parameter count of a head")
    p.add_argument("--head", required=True, choices=HEAD_KINDS)
    p.add_argument("--dim", type=int, required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of ops and heads")
    p.add_argument("--tol-primitives", type=float, default=1e-6)
    p.add_argument("--tol-heads", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    return parser


def _cmd_ingest(args) -> int:
    extractors = None
    if args.extractors:
        extractors = [e for group in _parse_extractor_sets(args.extractors) for e in group]
    manifest = load_manifest(args.manifest, args.features, extractors)
    _print_config("ingest", manifest=args.manifest, features=args.features,
                  extractors=manifest.extractors)
    records = [PatientRecord.from_manifest_row(r) for r in manifest.rows]
    n_censored = sum(r.censored for r in records)
    print(f"accepted {len(manifest)} cases "
          f"({n_censored} censored, {len(manifest) - n_censored} uncensored)")
    for case_id, reason in manifest.rejected:
        print(f"rejected {case_id}: {reason}")
    return 0


def _cmd_synth(args) -> int:
    out = _out_root(args.out)
    _print_config("synth", n=args.n, dim=args.dim, censor=args.censor,
                  signal=args.signal, seed=args.seed, out=out)
    manifest = synth_cohort(args.n, args.dim, args.censor, args.signal,
                            Rng(args.seed), out)
    n_censored = sum(r.censored for r in manifest.rows)
    print(f"wrote {len(manifest)} cases under {out} "
          f"({n_censored} censored, realized fraction {n_censored / len(manifest):.3f})")
    return 0


def _cmd_concat(args) -> int:
    parts = [p.strip() for p in args.parts.split(",") if p.strip()]
    in_dir, out_dir = Path(args.in_dir), Path(args.out)
    _print_config("concat", parts=parts, in_dir=in_dir, out_dir=out_dir)
    part_dirs = [in_dir / p for p in parts]
    for d in part_dirs:
        if not d.is_dir():
            raise ConfigurationError(f"missing extractor directory {d}")
    stems = sorted(f.stem for f in part_dirs[0].glob("*.milf"))
    if not stems:
        raise ConfigurationError(f"no .milf files under {part_dirs[0]}")
    out_dir.mkdir(parents=True, exist_ok=True)
    for stem in stems:
        matrices = [read_features(d / f"{stem}.milf") for d in part_dirs]
        ens = concat_ensemble(matrices)
        write_features(ens.as_feature_matrix(), out_dir / f"{stem}.milf")
    print(f"wrote {len(stems)} ensemble files (D={ens.d}) to {out_dir}")
    return 0


def _cmd_split(args) -> int:
    _print_config("split", manifest=args.manifest, folds=args.folds, seed=args.seed,
                  out=args.out)
    manifest = load_manifest(args.manifest, args.features)
    records = [PatientRecord.from_manifest_row(r) for r in manifest.rows]
    split = split_kfold(records, args.folds, Rng(args.seed, 7))
    split.save_csv(args.out)
    sizes = [len(split.cases_in(f)) for f in range(args.folds)]
    print(f"fold sizes: {sizes}")
    return 0


def _train_config(args) -> TrainConfig:
    overrides = {"seed": args.seed}
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if args.weight_decay is not None:
        overrides["weight_decay"] = args.weight_decay
    if args.patience is not None:
        overrides["patience"] = args.patience
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.earliest_stop is not None:
        overrides["earliest_stop_epoch"] = args.earliest_stop
    if args.preset:
        return preset_config(args.preset, **overrides)
    return TrainConfig(**overrides)


def _cmd_train(args) -> int:
    cfg = _train_config(args)
    extractor_sets = _parse_extractor_sets(args.extractors)
    out = _out_root(args.out)
    _print_config("train", manifest=args.manifest, extractor_sets=extractor_sets,
                  heads=args.head, folds=args.folds, jobs=args.jobs, out=out,
                  seed=cfg.seed, config=dataclasses.asdict(cfg))
    wanted = sorted({e for group in extractor_sets for e in group})
    manifest = load_manifest(args.manifest, args.features, wanted)
    table = run_cv(manifest, extractor_sets, args.head, cfg, k=args.folds,
                   out_dir=out, dataset=args.dataset, jobs=args.jobs)
    for cell in table.cells:
        name = f"{cell.head_kind} [{'+'.join(cell.extractor_set)}]"
        if cell.failed:
            print(f"{name}: FAILED ({cell.error})")
        else:
            print(f"{name}: {cell.mean:.3f} ± {cell.std:.3f}")
    print(f"report written under {out}")
    return 0


def _cmd_eval(args) -> int:
    extractor_set = [e.strip() for e in args.extractors.split(",") if e.strip()]
    _print_config("eval", checkpoint=args.checkpoint, manifest=args.manifest,
                  extractors=extractor_set, split=args.split, fold=args.fold)
    head, meta = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest, args.features, extractor_set)
    rows = manifest.rows
    if args.split is not None:
        if args.fold is None:
            raise ConfigurationError("--fold is required with --split")
        split = FoldSplit.load_csv(args.split)
        rows = [r for r in rows if split.fold_of(r.case_id) == args.fold]
    from .features import load_bag  # local import to keep startup lean

    def score(row):
        bag = load_bag(row, extractor_set).values.astype(np.float32)
        return risk_score(head.forward(bag, training=False).data)

    if args.jobs > 1:
        # read-only parameter sharing is safe across threads in evaluation
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            risks = list(pool.map(score, rows))
    else:
        risks = [score(row) for row in rows]
    times = [row.survival_months for row in rows]
    censored = [row.censored for row in rows]
    c = concordance_index(risks, times, censored)
    print(f"c-index over {len(rows)} cases: {c:.6f} "
          f"(checkpoint epoch {meta['epoch']}, seed {meta['seed']})")
    return 0


def _cmd_report(args) -> int:
    _print_config("report", in_path=args.in_path, format=args.format, out=args.out)
    table = parse_report_csv(args.in_path)
    emit_report(table, args.format, args.out)
    print(f"wrote {args.format} report to {args.out}")
    return 0


def _cmd_paramcount(args) -> int:
    _print_config("paramcount", head=args.head, dim=args.dim)
    print(parameter_count(head_config(args.head, args.dim)))
    return 0


def _cmd_gradcheck(args) -> int:
    from .verification import check_heads, check_primitives

    _print_config("gradcheck", tol_primitives=args.tol_primitives,
                  tol_heads=args.tol_heads, seed=args.seed)
    results = check_primitives(tol=args.tol_primitives, seed=args.seed)
    results += check_heads(tol=args.tol_heads, seed=args.seed)
    worst = 0.0
    failed = False
    for r in results:
        print(str(r))
        worst = max(worst, r.max_rel_error)
        failed = failed or not r.passed
    print(f"max relative error: {worst:.3e}")
    return 2 if failed else 0


_HANDLERS = {
    "ingest": _cmd_ingest,
    "synth": _cmd_synth,
    "concat": _cmd_concat,
    "split": _cmd_split,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "report": _cmd_report,
    "paramcount": _cmd_paramcount,
    "gradcheck": _cmd_gradcheck,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except _VALIDATION_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except MilsurvError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())
