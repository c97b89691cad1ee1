"""Rating logs: ingestion, binarization, temporal splits and sparsity filtering."""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
_HEADER = f"# mixrec-dataset v{DATASET_FORMAT_VERSION}"


class DataError(ValueError):
    """Raised when input data cannot produce a valid dataset."""


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: float
    label: int
    timestamp: int


@dataclass(frozen=True)
class Item:
    item_id: int
    title: str
    description: str = ""
    keywords: tuple[str, ...] = ()


@dataclass
class Dataset:
    """Time-ordered interactions plus the item table they reference.

    ``user_ids`` and ``item_ids`` map dense indices back to the raw ids of the
    source file, so densification never loses provenance.
    """

    interactions: list[Interaction]
    items: dict[int, Item]
    user_count: int
    item_count: int
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)
    malformed: int = 0

    def __post_init__(self) -> None:
        self.interactions = sorted(self.interactions, key=_order_key)

    def __len__(self) -> int:
        return len(self.interactions)

    def by_user(self) -> dict[int, list[Interaction]]:
        out: dict[int, list[Interaction]] = defaultdict(list)
        for it in self.interactions:
            out[it.user_id].append(it)
        return dict(out)

    def with_interactions(self, interactions: Iterable[Interaction]) -> "Dataset":
        return replace(self, interactions=list(interactions))


def _order_key(it: Interaction) -> tuple[int, int, int]:
    return (it.user_id, it.timestamp, it.item_id)


def binarize(rating: float, threshold: float) -> int:
    """1 iff ``rating`` is strictly greater than ``threshold``."""
    if not math.isfinite(rating):
        raise DataError(f"non-finite rating {rating!r}")
    return int(rating > threshold)


def load_items(path: str | Path, delimiter: str = "\t") -> dict[str, tuple[str, str]]:
    """Read an item-metadata file of ``id, title[, description]`` rows.

    Returns raw id -> (title, description).
    """
    out: dict[str, tuple[str, str]] = {}
    for line in _read_lines(path):
        parts = line.split(delimiter)
        if len(parts) < 2 or not parts[1].strip():
            continue
        desc = delimiter.join(parts[2:]).strip() if len(parts) > 2 else ""
        out[parts[0].strip()] = (parts[1].strip(), desc)
    return out


def _read_lines(path: str | Path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8", errors="replace")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


def ingest_raw(
    path: str | Path,
    delimiter: str = "::",
    threshold: float = 3.0,
    items: dict[str, tuple[str, str]] | None = None,
) -> Dataset:
    """Parse a ``user<d>item<d>rating<d>timestamp`` ratings file.

    Malformed rows (wrong arity, unparsable numbers, negative timestamps,
    duplicate (user, item, timestamp) triples) are skipped and counted in
    ``Dataset.malformed``. Items missing from ``items`` get a placeholder title.
    """
    rows: list[tuple[str, str, float, int]] = []
    seen: set[tuple[str, str, int]] = set()
    malformed = 0
    for line in _read_lines(path):
        parts = [p.strip() for p in line.split(delimiter)]
        try:
            if len(parts) != 4:
                raise ValueError
            rating = float(parts[2])
            ts = int(float(parts[3]))
            if not math.isfinite(rating) or ts < 0 or not parts[0] or not parts[1]:
                raise ValueError
        except ValueError:
            malformed += 1
            continue
        key = (parts[0], parts[1], ts)
        if key in seen:
            malformed += 1
            continue
        seen.add(key)
        rows.append((parts[0], parts[1], rating, ts))
    if malformed:
        logger.warning("%s: skipped %d malformed rows", path, malformed)
    if not rows:
        raise DataError(f"{path}: no valid rows")

    user_ids = sorted({r[0] for r in rows}, key=_natural)
    item_ids = sorted({r[1] for r in rows}, key=_natural)
    uidx = {u: i for i, u in enumerate(user_ids)}
    iidx = {it: i for i, it in enumerate(item_ids)}
    items = items or {}
    table = {}
    for raw, dense in iidx.items():
        title, desc = items.get(raw, (f"item {raw}", ""))
        table[dense] = Item(dense, title, desc)
    inter = [
        Interaction(uidx[u], iidx[i], r, binarize(r, threshold), t) for u, i, r, t in rows
    ]
    return Dataset(inter, table, len(user_ids), len(item_ids), user_ids, item_ids, malformed)


def _natural(raw: str) -> tuple[int, int | str]:
    return (0, int(raw)) if raw.isdigit() else (1, raw)


def temporal_split(
    dataset: Dataset, train_end: int, valid_end: int
) -> tuple[Dataset, Dataset, Dataset]:
    """Partition by timestamp: ``t <= train_end``, ``train_end < t <= valid_end``, rest.

    All three splits share the item table and the id space of ``dataset``.
    """
    if not train_end < valid_end:
        raise DataError("train_end must precede valid_end")
    parts: tuple[list[Interaction], ...] = ([], [], [])
    for it in dataset.interactions:
        idx = 0 if it.timestamp <= train_end else 1 if it.timestamp <= valid_end else 2
        parts[idx].append(it)
    for name, part in zip(("train", "valid", "test"), parts):
        if not part:
            logger.warning("temporal split produced an empty %s split", name)
    return tuple(dataset.with_interactions(p) for p in parts)  # type: ignore[return-value]


def filter_sparse(dataset: Dataset, min_interactions: int = 20) -> Dataset:
    """Drop users and items with fewer than ``min_interactions`` events.

    Removal repeats until nothing changes, then ids are re-densified; the raw id
    maps are carried over so the output still names source users/items.
    """
    if min_interactions < 1:
        raise DataError("min_interactions must be >= 1")
    inter = dataset.interactions
    while True:
        uc = Counter(it.user_id for it in inter)
        ic = Counter(it.item_id for it in inter)
        kept = [
            it for it in inter
            if uc[it.user_id] >= min_interactions and ic[it.item_id] >= min_interactions
        ]
        if len(kept) == len(inter):
            break
        inter = kept
    if not inter:
        raise DataError(f"no user/item survives min_interactions={min_interactions}")
    return densify(dataset.with_interactions(inter))


def densify(dataset: Dataset) -> Dataset:
    """Renumber users and items present in the interactions to 0..n-1, keeping order."""
    users = sorted({it.user_id for it in dataset.interactions})
    items = sorted({it.item_id for it in dataset.interactions})
    umap = {u: i for i, u in enumerate(users)}
    imap = {it: i for i, it in enumerate(items)}
    inter = [
        replace(it, user_id=umap[it.user_id], item_id=imap[it.item_id])
        for it in dataset.interactions
    ]
    table = {imap[k]: replace(v, item_id=imap[k]) for k, v in dataset.items.items() if k in imap}
    raw_u = [dataset.user_ids[u] if dataset.user_ids else str(u) for u in users]
    raw_i = [dataset.item_ids[i] if dataset.item_ids else str(i) for i in items]
    return Dataset(inter, table, len(users), len(items), raw_u, raw_i, dataset.malformed)


@dataclass(frozen=True)
class HistoryWindow:
    user_id: int
    entries: tuple[tuple[Item, int], ...]
    target: Item
    target_label: int
    timestamp: int


def history_windows(
    targets: Dataset,
    prior: Dataset | None = None,
    max_history: int = 10,
) -> list[HistoryWindow]:
    """One window per target interaction, holding the user's most recent earlier events.

    Earlier events come from ``prior`` (e.g. the train split when building
    test windows) and from ``targets`` itself. Targets without any earlier
    event are skipped.
    """
    past: dict[int, list[Interaction]] = defaultdict(list)
    if prior is not None:
        for it in prior.interactions:
            past[it.user_id].append(it)
    items = targets.items
    out: list[HistoryWindow] = []
    for user, evs in targets.by_user().items():
        history = sorted(past[user], key=_order_key)
        for ev in evs:
            earlier = [h for h in history if h.timestamp < ev.timestamp][-max_history:]
            if earlier:
                out.append(
                    HistoryWindow(
                        user,
                        tuple((items[h.item_id], h.label) for h in earlier),
                        items[ev.item_id],
                        ev.label,
                        ev.timestamp,
                    )
                )
            history.append(ev)
    return out


def save_dataset(
    directory: str | Path,
    splits: dict[str, Dataset],
    extra: dict[str, str] | None = None,
) -> None:
    """Write interactions, items and the split manifest as tab-separated tables.

    Column order: ``interactions.tsv`` user, item, rating, label, timestamp, split;
    ``items.tsv`` item, title, keywords (comma-joined), description;
    ``manifest.tsv`` key, value.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    first = next(iter(splits.values()))
    with open(d / "interactions.tsv", "w", encoding="utf-8", newline="") as fh:
        fh.write(_HEADER + "\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["user", "item", "rating", "label", "timestamp", "split"])
        for name, ds in splits.items():
            for it in ds.interactions:
                w.writerow([it.user_id, it.item_id, repr(float(it.rating)), it.label, it.timestamp, name])
    with open(d / "items.tsv", "w", encoding="utf-8", newline="") as fh:
        fh.write(_HEADER + "\n")
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["item", "title", "keywords", "description"])
        for k in sorted(first.items):
            item = first.items[k]
            w.writerow([k, item.title, ",".join(item.keywords), item.description])
    manifest = {
        "version": str(DATASET_FORMAT_VERSION),
        "user_count": str(first.user_count),
        "item_count": str(first.item_count),
        **{f"split.{n}": str(len(ds)) for n, ds in splits.items()},
        **(extra or {}),
    }
    with open(d / "manifest.tsv", "w", encoding="utf-8") as fh:
        fh.write(_HEADER + "\n")
        for k, v in manifest.items():
            fh.write(f"{k}\t{v}\n")


def load_dataset(directory: str | Path) -> tuple[dict[str, Dataset], dict[str, str]]:
    """Inverse of :func:`save_dataset`. Returns (splits, manifest)."""
    d = Path(directory)
    for name in ("interactions.tsv", "items.tsv", "manifest.tsv"):
        _check_header(d / name)
    manifest = {}
    for line in (d / "manifest.tsv").read_text(encoding="utf-8").splitlines()[1:]:
        k, _, v = line.partition("\t")
        manifest[k] = v
    items: dict[int, Item] = {}
    with open(d / "items.tsv", encoding="utf-8", newline="") as fh:
        rows = csv.reader(fh, delimiter="\t")
        next(rows), next(rows)
        for row in rows:
            kws = tuple(k for k in row[2].split(",") if k)
            items[int(row[0])] = Item(int(row[0]), row[1], row[3], kws)
    parts: dict[str, list[Interaction]] = {}
    with open(d / "interactions.tsv", encoding="utf-8", newline="") as fh:
        rows = csv.reader(fh, delimiter="\t")
        next(rows), next(rows)
        for row in rows:
            it = Interaction(int(row[0]), int(row[1]), float(row[2]), int(row[3]), int(row[4]))
            parts.setdefault(row[5], []).append(it)
    uc, ic = int(manifest["user_count"]), int(manifest["item_count"])
    splits = {n: Dataset(p, items, uc, ic) for n, p in parts.items()}
    for n in ("train", "valid", "test"):
        splits.setdefault(n, Dataset([], items, uc, ic))
    return splits, manifest


def _check_header(path: Path) -> None:
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
    if first != _HEADER:
        raise DataError(f"{path}: unsupported dataset header {first!r}")


def merge(parts: Sequence[Dataset]) -> Dataset:
    return parts[0].with_interactions(it for p in parts for it in p.interactions)
