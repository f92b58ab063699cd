"""Per-fold training (Adam, batch size 1, gradient accumulation, L1 +
weight decay, early stopping) and the K-fold cross-validation harness
with mean +/- std reporting.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .cohort import BinEdges, FoldSplit, discretize, split_kfold
from .cohort_types import PatientRecord
from .errors import ConfigurationError, MilsurvError, NonFiniteError
from .features import Manifest, load_bag
from .heads import HeadConfig, MilHead, build_head, head_config
from .rng import Rng
from .survival import nll_loss, risk_score, survival_output, concordance_index

# Rng stream layout: purpose slots inside a block per (cell, fold), where
# the cell salt hashes the head kind and extractor set. Every grid cell
# therefore owns fully independent init/shuffle/dropout streams; the fold
# split stream is global to the run.
_STREAM_BLOCK = 16
_INIT, _SHUFFLE, _DROPOUT, _SPLIT = 1, 2, 3, 7


def _cell_stream_base(head_kind: str, extractor_set, fold: int) -> int:
    salt = zlib.crc32(f"{head_kind}|{','.join(extractor_set)}".encode("utf-8"))
    return (salt << 16) + fold * _STREAM_BLOCK


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared across heads; presets carry the per-dataset
    published values. ``bag_weight`` is recorded for config fidelity but
    has no numerical effect: the loss is purely bag-level."""

    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    l1_coeff: float = 1e-4
    epochs: int = 200
    earliest_stop_epoch: int = 40
    patience: int = 10
    grad_accum_steps: int = 32
    dropout: float = 0.25
    bag_weight: float = 0.7
    bins: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.weight_decay, self.l1_coeff) < 0:
            raise ConfigurationError("rates must be nonnegative")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.earliest_stop_epoch > self.epochs:
            raise ConfigurationError("earliest_stop_epoch must be <= epochs")
        if self.grad_accum_steps < 1:
            raise ConfigurationError("grad_accum_steps must be >= 1")


PRESETS: dict[str, dict] = {
    "blca": {"learning_rate": 2e-4, "weight_decay": 1e-3, "patience": 10},
    "luad": {"learning_rate": 1e-4, "weight_decay": 5e-4, "patience": 5},
    "brca": {"learning_rate": 5e-5, "weight_decay": 5e-4, "patience": 10},
}


def preset_config(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    merged = {**PRESETS[name], **overrides}
    return TrainConfig(**merged)


def config_hash(obj) -> str:
    """Short stable digest of any dataclass/dict config, for provenance."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        obj = dataclasses.asdict(obj)
    payload = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


class Adam:
    """Adam with classic coupled L2 weight decay (decay added to the
    gradient before the moment updates)."""

    def __init__(self, params: list[tuple[str, ad.Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros_like(t.data) for _, t in params]
        self._v = [np.zeros_like(t.data) for _, t in params]

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (_, t) in enumerate(self.params):
            g = np.zeros_like(t.data) if t.grad is None else t.grad
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            t.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(t.data.dtype)


class EarlyStopper:
    """Maximize validation concordance; stop after ``patience`` epochs
    without improvement, but never before ``earliest_stop_epoch``.
    Epochs are 1-based."""

    def __init__(self, earliest_stop_epoch: int, patience: int):
        self.earliest_stop_epoch = earliest_stop_epoch
        self.patience = patience
        self.best_value = -math.inf
        self.best_epoch = 0
        self._since_best = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch's metric; returns True when it improved."""
        if value > self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            self._since_best = 0
            return True
        self._since_best += 1
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch >= self.earliest_stop_epoch and self._since_best >= self.patience


def slide_loss(head: MilHead, bag, bin: int, censored: bool, l1_coeff: float,
               rng: Rng | None, tape: ad.Tape | None, training: bool = True) -> ad.Tensor:
    """One slide's objective: censored NLL plus l1_coeff * sum |W| over
    linear/conv kernels (biases, norms, and the class token are exempt)."""
    logits = head.forward(bag, training=training, rng=rng, tape=tape)
    out = survival_output(logits, tape=tape)
    loss = nll_loss(out, bin, censored, tape=tape)
    if l1_coeff > 0:
        weights = head.weight_tensors()
        l1 = ad.reduce_sum(ad.absolute(weights[0], tape), tape=tape)
        for w in weights[1:]:
            l1 = ad.add(l1, ad.reduce_sum(ad.absolute(w, tape), tape=tape), tape)
        loss = ad.add(loss, ad.mul(l1, l1_coeff, tape), tape)
    return loss


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    best_val_cindex: float
    final_train_loss: float
    checkpoint_path: str | None = None


@dataclass
class _SlideData:
    case_id: str
    bag: np.ndarray
    bin: int
    censored: bool
    survival_months: float


def _load_fold_data(manifest: Manifest, extractor_set: list[str], edges: BinEdges,
                    split: FoldSplit, fold: int) -> tuple[list[_SlideData], list[_SlideData]]:
    train, val = [], []
    for row in manifest.rows:
        bag = load_bag(row, extractor_set).values.astype(np.float32)
        sd = _SlideData(row.case_id, bag, edges.bin_for(row.survival_months),
                        row.censored, row.survival_months)
        (val if split.fold_of(row.case_id) == fold else train).append(sd)
    return train, val


def _validate(head: MilHead, slides: list[_SlideData]) -> float:
    risks = [risk_score(head.forward(s.bag, training=False).data) for s in slides]
    times = [s.survival_months for s in slides]
    censored = [s.censored for s in slides]
    return concordance_index(risks, times, censored)


def train_fold(manifest: Manifest, extractor_set: list[str], head_cfg: HeadConfig,
               cfg: TrainConfig, split: FoldSplit, fold: int, edges: BinEdges,
               checkpoint_path=None, log_path=None) -> FoldResult:
    """Train one fold to early stop and return the best-epoch result.

    Slides stream one at a time in a seeded shuffled order; losses are
    scaled by 1/grad_accum_steps and gradients accumulate until 32 slides
    (or the epoch remainder) have been seen, then Adam steps once.
    """
    train, val = _load_fold_data(manifest, extractor_set, edges, split, fold)
    if not train or not val:
        raise ConfigurationError(f"fold {fold} has an empty train or validation side")

    base = Rng(cfg.seed)
    stream_base = _cell_stream_base(head_cfg.kind, extractor_set, fold)
    head = build_head(head_cfg, base.stream(stream_base + _INIT))
    shuffle_rng = base.stream(stream_base + _SHUFFLE)
    dropout_rng = base.stream(stream_base + _DROPOUT)
    opt = Adam(head.named_parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    stopper = EarlyStopper(cfg.earliest_stop_epoch, cfg.patience)
    scale = 1.0 / cfg.grad_accum_steps

    log_rows = []
    epoch_loss = math.nan
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train))
        pending = 0
        total = 0.0
        for idx in order:
            s = train[int(idx)]
            tape = ad.Tape()
            loss = slide_loss(head, s.bag, s.bin, s.censored, cfg.l1_coeff,
                              dropout_rng, tape, training=True)
            val_f = float(loss.data)
            if not math.isfinite(val_f):
                raise NonFiniteError(
                    f"non-finite loss at epoch {epoch}, slide {s.case_id!r} (fold {fold})"
                )
            total += val_f
            ad.backward(ad.mul(loss, scale, tape), tape)
            pending += 1
            if pending == cfg.grad_accum_steps:
                opt.step()
                opt.zero_grad()
                pending = 0
        if pending:  # flush the remainder as a smaller accumulated step
            opt.step()
            opt.zero_grad()
        epoch_loss = total / len(train)
        val_c = _validate(head, val)
        if stopper.update(epoch, val_c) and checkpoint_path is not None:
            save_checkpoint(checkpoint_path, head, cfg.seed, epoch)
        log_rows.append((epoch, epoch_loss, val_c))
        if stopper.should_stop(epoch):
            break

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_cindex"])
            for row in log_rows:
                writer.writerow([row[0], repr(row[1]), repr(row[2])])
    return FoldResult(fold=fold, best_epoch=stopper.best_epoch,
                      best_val_cindex=stopper.best_value,
                      final_train_loss=epoch_loss,
                      checkpoint_path=None if checkpoint_path is None else str(checkpoint_path))


# ---------------------------------------------------------------------------
# cross-validation grid


@dataclass
class CellResult:
    """One (head kind, extractor set) cell of the report grid."""

    head_kind: str
    extractor_set: tuple[str, ...]
    folds: list[FoldResult] = field(default_factory=list)
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def values(self) -> list[float]:
        return [f.best_val_cindex for f in self.folds]

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        return float(np.std(self.values))  # population convention


@dataclass
class ReportTable:
    """Rows of cell results for one dataset; std is population (ddof=0),
    stated in every emitted header."""

    dataset: str
    k: int
    seed: int
    config_digest: str
    cells: list[CellResult] = field(default_factory=list)


def _cell_tag(head_kind: str, extractor_set: tuple[str, ...]) -> str:
    return f"{head_kind}__{'+'.join(extractor_set)}"


def _run_one_fold(args) -> tuple[int, FoldResult | str]:
    (fold, manifest, eset, hcfg, tcfg, split, edges, ckpt, log) = args
    try:
        return fold, train_fold(manifest, list(eset), hcfg, tcfg, split, fold, edges,
                                checkpoint_path=ckpt, log_path=log)
    except MilsurvError as exc:
        return fold, f"{type(exc).__name__}: {exc}"


def run_cv(manifest: Manifest, extractor_sets: list[list[str]], head_kinds: list[str],
           cfg: TrainConfig, k: int = 5, out_dir=None, dataset: str = "cohort",
           jobs: int = 1, head_overrides: dict | None = None) -> ReportTable:
    """Train every (head, extractor set) cell over K folds and aggregate.

    A failing fold marks its cell failed but the remaining cells still
    run. With jobs=1 everything is sequential and bit-reproducible; more
    jobs parallelize over folds with independent Rng streams.
    """
    records = [PatientRecord.from_manifest_row(r) for r in manifest.rows]
    edges, _ = discretize(records, bins=cfg.bins)
    split = split_kfold(records, k, Rng(cfg.seed, _SPLIT))

    out_dir = None if out_dir is None else Path(out_dir)
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out_dir / "logs").mkdir(parents=True, exist_ok=True)
        split.save_csv(out_dir / "splits.csv")

    table = ReportTable(dataset=dataset, k=k, seed=cfg.seed,
                        config_digest=config_hash(cfg))
    for head_kind in head_kinds:
        for eset in extractor_sets:
            eset_t = tuple(eset)
            sample = load_bag(manifest.rows[0], list(eset))
            hcfg = head_config(head_kind, sample.d, dropout_rate=cfg.dropout,
                               **(head_overrides or {}))
            tag = _cell_tag(head_kind, eset_t)
            tasks = []
            for fold in range(k):
                ckpt = log = None
                if out_dir is not None:
                    ckpt = out_dir / "checkpoints" / f"{tag}__fold{fold}.milc"
                    log = out_dir / "logs" / f"{tag}__fold{fold}.csv"
                tasks.append((fold, manifest, eset_t, hcfg, cfg, split, edges, ckpt, log))
            cell = CellResult(head_kind=head_kind, extractor_set=eset_t)
            if jobs > 1:
                with ProcessPoolExecutor(max_workers=jobs) as pool:
                    outcomes = list(pool.map(_run_one_fold, tasks))
            else:
                outcomes = [_run_one_fold(t) for t in tasks]
            for fold, outcome in sorted(outcomes, key=lambda fr: fr[0]):
                if isinstance(outcome, str):
                    cell.error = f"fold {fold}: {outcome}"
                else:
                    cell.folds.append(outcome)
            table.cells.append(cell)
    if out_dir is not None:
        emit_report(table, "csv", out_dir / "report.csv")
        emit_report(table, "markdown", out_dir / "report.md")
        write_results_csv(table, out_dir / "results.csv")
    return table


# ---------------------------------------------------------------------------
# report rendering


def format_cell(mean: float, std: float) -> str:
    return f"{mean:.3f} ± {std:.3f}"


def emit_report(table: ReportTable, fmt: str, path) -> None:
    """Render the grid; markdown shows mean +/- std to 3 decimals, CSV
    carries full precision and round-trips via ``parse_report_csv``."""
    path = Path(path)
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            fh.write(f"# dataset={table.dataset} k={table.k} seed={table.seed} "
                     f"config={table.config_digest} std=population\n")
            writer = csv.writer(fh)
            writer.writerow(["head", "extractors", "dataset", "mean", "std", "folds"])
            for cell in table.cells:
                if cell.failed:
                    writer.writerow([cell.head_kind, "+".join(cell.extractor_set),
                                     table.dataset, "", "", cell.error])
                else:
                    writer.writerow([cell.head_kind, "+".join(cell.extractor_set),
                                     table.dataset, repr(cell.mean), repr(cell.std),
                                     ";".join(repr(v) for v in cell.values)])
    elif fmt == "markdown":
        lines = [
            f"| MIL Method | Extractors | {table.dataset} | Average |",
            "|---|---|---|---|",
        ]
        failed = False
        for cell in table.cells:
            if cell.failed:
                shown = "—"
                failed = True
            else:
                shown = format_cell(cell.mean, cell.std)
            lines.append(
                f"| {cell.head_kind} | {'+'.join(cell.extractor_set)} | {shown} | {shown} |"
            )
        lines.append("")
        if failed:
            lines.append("—: cell failed; see results.csv for the error.")
        lines.append(f"K={table.k}, seed={table.seed}, config={table.config_digest}, "
                     "std over folds (population).")
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ConfigurationError(f"unknown report format {fmt!r}")


def parse_report_csv(path) -> ReportTable:
    """Inverse of ``emit_report(..., 'csv', ...)`` for round-tripping."""
    path = Path(path)
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        meta = dict(kv.split("=", 1) for kv in first.lstrip("# ").split())
        table = ReportTable(dataset=meta["dataset"], k=int(meta["k"]),
                            seed=int(meta["seed"]), config_digest=meta["config"])
        for row in csv.DictReader(fh):
            cell = CellResult(head_kind=row["head"],
                              extractor_set=tuple(row["extractors"].split("+")))
            if row["mean"] == "":
                cell.error = row["folds"]
            else:
                values = [float(v) for v in row["folds"].split(";")]
                cell.folds = [FoldResult(fold=i, best_epoch=-1, best_val_cindex=v,
                                         final_train_loss=math.nan)
                              for i, v in enumerate(values)]
            table.cells.append(cell)
    return table


def write_results_csv(table: ReportTable, path) -> None:
    """Raw per-fold rows (best epoch, c-index) for downstream tooling."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# dataset={table.dataset} k={table.k} seed={table.seed} "
                 f"config={table.config_digest} std=population\n")
        writer = csv.writer(fh)
        writer.writerow(["head", "extractors", "fold", "best_epoch", "best_val_cindex",
                         "final_train_loss", "error"])
        for cell in table.cells:
            if cell.failed:
                writer.writerow([cell.head_kind, "+".join(cell.extractor_set),
                                 "", "", "", "", cell.error])
                continue
            for fr in cell.folds:
                writer.writerow([cell.head_kind, "+".join(cell.extractor_set), fr.fold,
                                 fr.best_epoch, repr(fr.best_val_cindex),
                                 repr(fr.final_train_loss), ""])
