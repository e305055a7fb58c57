"""Dataset, split, and configuration ingestion; CSV emission.

Dataset directory layout::

    nodes.csv            id,<label_col>,<sens_col>,<feature columns...>
    edges.csv            src,dst (directed duplicates collapse on load)
    split_train.txt      optional, one node index per line
    split_val.txt        optional
    split_test.txt       optional

Config files are UTF-8 ``key = value`` lines with ``#`` comments. Unknown
or duplicate keys are errors so typos cannot silently change a run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fairmp.errors import DataError
from fairmp.graph import (SPLIT_NONE, SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL,
                          AttributedGraph)


@dataclass(frozen=True)
class DatasetDescriptor:
    path: Path
    label_col: str = "label"
    sens_col: str = "sens"
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "path", Path(self.path))


def normalize_features(x: np.ndarray) -> np.ndarray:
    """Min-max scale each column to [0, 1]; constant columns map to 0.

    Idempotent: applying it twice equals applying it once.
    """
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=0)
    hi = x.max(axis=0)
    span = hi - lo
    out = np.zeros_like(x)
    nz = span > 0
    out[:, nz] = (x[:, nz] - lo[nz]) / span[nz]
    return out


def _read_rows(path: Path) -> tuple[list, list]:
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"empty file: {path}") from None
        rows = [row for row in reader if row]
    width = len(header)
    for lineno, row in enumerate(rows, start=2):
        if len(row) != width:
            raise DataError(f"{path}: ragged row at line {lineno}")
    return header, rows


def _binary_column(values: list, name: str, path: Path) -> np.ndarray:
    try:
        arr = np.array([int(v) for v in values], dtype=np.int64)
    except ValueError:
        raise DataError(f"{path}: column {name!r} must be integer") from None
    if not np.isin(arr, (0, 1)).all():
        raise DataError(f"{path}: column {name!r} must be binary (0/1)")
    return arr


def load_dataset(desc: DatasetDescriptor) -> AttributedGraph:
    """Load a dataset directory into a validated graph.

    Node ids must form a permutation of 0..N-1; rows are reordered by id.
    Edges are symmetrized and deduplicated. Features are min-max scaled
    unless the descriptor disables it.
    """
    nodes_path = desc.path / "nodes.csv"
    edges_path = desc.path / "edges.csv"
    header, rows = _read_rows(nodes_path)
    for col in ("id", desc.label_col, desc.sens_col):
        if col not in header:
            raise DataError(f"{nodes_path}: missing column {col!r}")
    col_idx = {name: i for i, name in enumerate(header)}
    feature_cols = [c for c in header
                    if c not in ("id", desc.label_col, desc.sens_col)]
    if not feature_cols:
        raise DataError(f"{nodes_path}: no feature columns")
    n = len(rows)
    try:
        ids = np.array([int(r[col_idx["id"]]) for r in rows], dtype=np.int64)
    except ValueError:
        raise DataError(f"{nodes_path}: non-integer id") from None
    if sorted(ids.tolist()) != list(range(n)):
        raise DataError(f"{nodes_path}: ids must be a permutation of 0..N-1")
    order = np.argsort(ids)
    rows = [rows[i] for i in order]
    labels = _binary_column([r[col_idx[desc.label_col]] for r in rows],
                            desc.label_col, nodes_path)
    sens = _binary_column([r[col_idx[desc.sens_col]] for r in rows],
                          desc.sens_col, nodes_path)
    try:
        feats = np.array([[float(r[col_idx[c]]) for c in feature_cols]
                          for r in rows], dtype=np.float64)
    except ValueError:
        raise DataError(f"{nodes_path}: non-numeric feature value") from None
    if not np.isfinite(feats).all():
        raise DataError(f"{nodes_path}: non-finite feature value")
    if desc.normalize:
        feats = normalize_features(feats)

    eh, erows = _read_rows(edges_path)
    if eh[:2] != ["src", "dst"]:
        raise DataError(f"{edges_path}: header must start with src,dst")
    try:
        pairs = np.array([[int(r[0]), int(r[1])] for r in erows],
                         dtype=np.int64).reshape(-1, 2)
    except ValueError:
        raise DataError(f"{edges_path}: non-integer endpoint") from None
    if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
        raise DataError(f"{edges_path}: edge endpoint out of range")
    return AttributedGraph.from_edge_list(feats, labels, sens, pairs)


def dump_dataset(graph: AttributedGraph, path: Path,
                 label_col: str = "label", sens_col: str = "sens") -> None:
    """Write a graph back out in the dataset directory layout."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    d = graph.num_features
    with open(path / "nodes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", label_col, sens_col] + [f"f{i}" for i in range(d)])
        for i in range(graph.num_nodes):
            w.writerow([i, int(graph.labels[i]), int(graph.sensitive[i])]
                       + [repr(float(v)) for v in graph.features[i]])
    with open(path / "edges.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst"])
        for a, b in graph.edges:
            w.writerow([int(a), int(b)])


def _read_split_file(path: Path, n: int) -> np.ndarray:
    idx = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                v = int(line)
            except ValueError:
                raise DataError(f"{path}: non-integer index at line "
                                f"{lineno}") from None
            if not 0 <= v < n:
                raise DataError(f"{path}: index {v} out of range")
            idx.append(v)
    return np.array(idx, dtype=np.int64)


def load_or_make_splits(desc: DatasetDescriptor, graph: AttributedGraph,
                        seed: int, train_count: int,
                        val_count: int) -> np.ndarray:
    """Split files are honored verbatim when present; otherwise a seeded
    label-stratified random split with the requested counts is drawn
    (remaining nodes become test)."""
    n = graph.num_nodes
    files = {tag: desc.path / f"split_{name}.txt"
             for tag, name in ((SPLIT_TRAIN, "train"), (SPLIT_VAL, "val"),
                               (SPLIT_TEST, "test"))}
    if any(p.exists() for p in files.values()):
        split = np.full(n, SPLIT_NONE, dtype=np.int8)
        seen = np.zeros(n, dtype=bool)
        for tag, p in files.items():
            if not p.exists():
                continue
            idx = _read_split_file(p, n)
            if seen[idx].any():
                raise DataError(f"{p}: overlaps another split file")
            seen[idx] = True
            split[idx] = tag
        return split
    if train_count < 1 or val_count < 0:
        raise DataError("split counts must be positive")
    if train_count + val_count >= n:
        raise DataError("split counts exceed the node count")
    rng = np.random.default_rng([seed, 3])
    split = np.full(n, SPLIT_TEST, dtype=np.int8)
    # stratify by label: proportional share of each class per split
    train_idx, val_idx = [], []
    for cls in (0, 1):
        cls_idx = np.flatnonzero(graph.labels == cls)
        rng.shuffle(cls_idx)
        share = cls_idx.size / n
        t = int(round(train_count * share))
        v = int(round(val_count * share))
        train_idx.extend(cls_idx[:t].tolist())
        val_idx.extend(cls_idx[t:t + v].tolist())
    split[np.array(train_idx, dtype=np.int64)] = SPLIT_TRAIN
    if val_idx:
        split[np.array(val_idx, dtype=np.int64)] = SPLIT_VAL
    return split


# ---------------------------------------------------------------------------
# metrics CSV emission
# ---------------------------------------------------------------------------

METRICS_HEADER = ["epoch", "loss", "acc", "f1", "auc", "dp", "eo", "sim"]


def write_metrics_csv(records, path: Path) -> None:
    """Per-epoch trace with the fixed header; metrics are the test-mask
    values of each epoch."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([r.epoch, repr(float(r.loss)),
                        repr(r.test.accuracy), repr(r.test.f1),
                        repr(r.test.auc), repr(r.test.delta_dp),
                        repr(r.test.delta_eo), repr(float(r.sim))])


def read_metrics_csv(path: Path) -> list[dict]:
    header, rows = _read_rows(Path(path))
    if header != METRICS_HEADER:
        raise DataError(f"{path}: unexpected header {header!r}")
    out = []
    for row in rows:
        rec = {"epoch": int(row[0])}
        rec.update({k: float(v) for k, v in zip(header[1:], row[1:])})
        out.append(rec)
    return out


def write_summary_csv(stats: dict, path: Path) -> None:
    """Summary over repetitions: one row per metric with mean and std."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "mean", "std"])
        for name, values in stats.items():
            arr = np.asarray(values, dtype=np.float64)
            w.writerow([name, repr(float(arr.mean())),
                        repr(float(arr.std()))])


def read_summary_csv(path: Path) -> dict:
    header, rows = _read_rows(Path(path))
    if header != ["metric", "mean", "std"]:
        raise DataError(f"{path}: unexpected header {header!r}")
    return {row[0]: (float(row[1]), float(row[2])) for row in rows}


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise DataError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise DataError(f"expected one of {options}, got {text!r}")
        return text
    return parse


def _ranged(parse, lo=None, hi=None, strict_lo=False):
    def inner(text: str):
        v = parse(text)
        if lo is not None and (v <= lo if strict_lo else v < lo):
            raise DataError(f"value {v} below allowed range")
        if hi is not None and v > hi:
            raise DataError(f"value {v} above allowed range")
        return v
    return inner


# key -> (parser, default); defaults of None mean "derive at resolve time"
CONFIG_SCHEMA: dict = {
    "data.path": (str, ""),
    "data.label_col": (str, "label"),
    "data.sens_col": (str, "sens"),
    "data.normalize": (_parse_bool, True),
    "split.train_count": (_ranged(int, lo=1), None),
    "split.val_count": (_ranged(int, lo=0), None),
    "train.lr": (_ranged(float, lo=0.0, strict_lo=True), 0.003),
    "train.weight_decay": (_ranged(float, lo=0.0), 1e-5),
    "train.epochs": (_ranged(int, lo=1), 200),
    "train.seed": (int, 0),
    "train.repetitions": (_ranged(int, lo=1), 5),
    "train.m_layers": (_ranged(int, lo=1), 2),
    "train.hidden": (_ranged(int, lo=1), 16),
    "train.loss_variant": (_choice("gmmd", "mmd_reg_baseline", "vanilla"),
                           "gmmd"),
    "train.ablation": (_choice("none", "no_smooth", "no_fair", "no_both",
                               "no_sample"), "none"),
    "prop.variant": (_choice("gmmd", "gmmd_s", "vanilla"), "gmmd"),
    "prop.backbone": (_choice("gcn", "gin", "gat"), "gcn"),
    "prop.k": (_ranged(int, lo=0), 2),
    "prop.lambda_s": (_ranged(float, lo=0.0), 1.0),
    "prop.lambda_f": (_ranged(float, lo=0.0), 1.0),
    "prop.lambda_f_pairs": (_parse_bool, False),
    "prop.alpha": (_ranged(float, lo=0.0, strict_lo=True), 1.0),
    "prop.kernel_grad": (_choice("full", "detached"), "full"),
    "prop.gin_epsilon": (float, 0.0),
    "prop.sample_size": (_ranged(int, lo=0), 0),
    "eval.mask": (_choice("val", "test"), "test"),
    "sim.pairs": (_ranged(int, lo=1), 200),
    "model.path": (str, ""),
    "theory.instances": (_ranged(int, lo=0), 100),
    "theory.nodes": (_ranged(int, lo=4), 20),
    "theory.dim": (_ranged(int, lo=1), 4),
    "theory.edge_prob": (_ranged(float, lo=0.0, hi=1.0, strict_lo=True), 0.3),
    "theory.alpha": (_ranged(float, lo=0.0, strict_lo=True), 1.0),
    "theory.seed": (int, 0),
}

# keys that cmd_sweep may take value lists for
SWEEPABLE = ("prop.lambda_s", "prop.lambda_f", "prop.k", "prop.alpha",
             "train.lr", "train.weight_decay", "train.m_layers",
             "prop.sample_size")


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into a validated flat dict.

    ``sweep.<key>`` entries hold comma-separated value lists for any
    sweepable key and are stored under the full ``sweep.``-prefixed name.
    """
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise DataError(f"line {lineno}: duplicate key {key!r}")
        if key.startswith("sweep."):
            base = key[len("sweep."):]
            if base not in SWEEPABLE:
                raise DataError(f"line {lineno}: {base!r} is not sweepable")
            parser = CONFIG_SCHEMA[base][0]
            values = [parser(v.strip()) for v in value.split(",") if v.strip()]
            if not values:
                raise DataError(f"line {lineno}: empty sweep list")
            deduped = list(dict.fromkeys(values))
            out[key] = deduped
            continue
        if key not in CONFIG_SCHEMA:
            raise DataError(f"line {lineno}: unknown key {key!r}")
        out[key] = CONFIG_SCHEMA[key][0](value)
    return out


def load_config(path: Path | None, overrides: list[str]) -> dict:
    """Config file plus repeatable ``key=value`` overrides, on defaults."""
    cfg = {k: default for k, (_, default) in CONFIG_SCHEMA.items()}
    if path is not None:
        cfg.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    for item in overrides:
        if "=" not in item:
            raise DataError(f"override {item!r} must be key=value")
        parsed = parse_config_text(item)
        cfg.update(parsed)
    return cfg


def write_manifest(values: dict, path: Path) -> None:
    """Plain-text record of every resolved value for reproducibility."""
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
