"""Benchmark task recipes and train/test manifests drawn from tagged corpora."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce

from .case_io import DatasetManifest, ManifestCell

STANDARD_SIZES = (14, 30, 57, 118, 500)
EXTENDED_SIZES = STANDARD_SIZES + (2000,)
ALL_TOPOLOGIES = ("N", "N-1", "N-2")
TEST_MIX = {"feasible": 6000, "close-to-infeasible": 600}


class ManifestError(ValueError):
    pass


class ShortfallError(ManifestError):
    def __init__(self, shortfall: list[dict]):
        self.shortfall = shortfall
        super().__init__(f"{len(shortfall)} manifest cell(s) lack samples")


@dataclass(frozen=True)
class TaskRecipe:
    """Per-size train regime totals, split evenly over the train topologies.

    ``train_sizes``/``test_sizes`` of ``None`` mean "the chosen bus size";
    ``test_sizes == "others"`` means every standard size except the chosen one.
    """

    task: str
    train_topologies: tuple[str, ...]
    train_mix: dict[str, int]
    sizes: tuple[int, ...] = STANDARD_SIZES
    train_sizes: tuple[int, ...] | None = None
    test_sizes: tuple[int, ...] | str | None = None

    def resolve_sizes(self, bus_size: int | None) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if self.train_sizes is not None and not isinstance(self.test_sizes, str):
            return self.train_sizes, self.test_sizes
        if bus_size is None:
            raise ManifestError(f"task {self.task} needs a bus size, one of {list(self.sizes)}")
        if bus_size not in self.sizes:
            raise ManifestError(f"task {self.task} supports bus sizes {list(self.sizes)}, got {bus_size}")
        if self.test_sizes == "others":
            return (bus_size,), tuple(s for s in self.sizes if s != bus_size)
        return (bus_size,), (bus_size,)

    def base_cells(self, bus_size: int | None) -> list[tuple[int, str, str, str, int]]:
        train_sizes, test_sizes = self.resolve_sizes(bus_size)
        cells = []
        for size in train_sizes:
            for regime, total in self.train_mix.items():
                for topo in self.train_topologies:
                    cells.append((size, regime, topo, "train", total // len(self.train_topologies)))
        for size in test_sizes:
            for regime, total in TEST_MIX.items():
                for topo in ALL_TOPOLOGIES:
                    cells.append((size, regime, topo, "test", total // len(ALL_TOPOLOGIES)))
        return cells


_FULL = ALL_TOPOLOGIES
TASKS: dict[str, TaskRecipe] = {
    "1.1": TaskRecipe("1.1", ("N",), {"feasible": 54000}),
    "1.2": TaskRecipe("1.2", ("N", "N-1"), {"feasible": 54000}),
    "1.3": TaskRecipe("1.3", _FULL, {"feasible": 54000}, sizes=EXTENDED_SIZES),
    "2.1": TaskRecipe("2.1", _FULL, {"feasible": 54000}, sizes=EXTENDED_SIZES),
    "2.2": TaskRecipe("2.2", _FULL, {"feasible": 36000}),
    "2.3": TaskRecipe("2.3", _FULL, {"feasible": 18000}),
    "3.1": TaskRecipe("3.1", _FULL, {"feasible": 54000}, test_sizes="others"),
    "3.2": TaskRecipe("3.2", _FULL, {"feasible": 54000}, train_sizes=(14, 30, 57), test_sizes=(118, 500)),
    "3.3": TaskRecipe("3.3", _FULL, {"feasible": 54000}, train_sizes=(118, 500), test_sizes=(14, 30, 57)),
    "4.1": TaskRecipe("4.1", _FULL, {"feasible": 48600, "close-to-infeasible": 5400}),
    "4.2": TaskRecipe("4.2", _FULL, {"feasible": 27000, "close-to-infeasible": 5400,
                                     "approaching-infeasible": 21600}),
    "4.3": TaskRecipe("4.3", _FULL, {"close-to-infeasible": 10800, "approaching-infeasible": 43200}),
}


def get_task(task_id: str) -> TaskRecipe:
    try:
        return TASKS[task_id]
    except KeyError:
        raise ManifestError(f"unknown task {task_id!r}; valid ids: {', '.join(TASKS)}") from None


def scaled_counts(counts: list[int], scale: float) -> list[int]:
    """Scale counts so their mutual ratios stay exact.

    Counts are expressed in units of their greatest common divisor ``g`` and the
    number of units per count is ``max(1, round(g * scale))``.
    """
    if scale <= 0:
        raise ManifestError("scale must be positive")
    g = reduce(math.gcd, counts)
    per_unit = max(1, round(g * scale))
    return [c // g * per_unit for c in counts]


def build_manifest(corpus: list[dict], task_id: str, scale: float = 1.0,
                   bus_size: int | None = None, strict: bool = False) -> DatasetManifest:
    """Select corpus entries for every cell of a task.

    ``corpus`` entries carry ``id``, ``path``, ``bus_size``, ``regime`` and
    ``topology``.  Entries are taken in id order; a cell shared by train and
    test fills train first so the splits never overlap.
    """
    recipe = get_task(task_id)
    base = recipe.base_cells(bus_size)
    counts = scaled_counts([c[-1] for c in base], scale)

    pools: dict[tuple, list[dict]] = {}
    for entry in sorted(corpus, key=lambda e: e["id"]):
        pools.setdefault((int(entry["bus_size"]), entry["regime"], entry["topology"]), []).append(entry)
    taken: dict[tuple, int] = {}

    shortfall = []
    order = sorted(range(len(base)), key=lambda i: base[i][3] != "train")  # train first
    picked: dict[int, ManifestCell] = {}
    for i in order:
        size, regime, topo, split, _ = base[i]
        want = counts[i]
        key = (size, regime, topo)
        pool = pools.get(key, [])
        start = taken.get(key, 0)
        chosen = pool[start:start + want]
        taken[key] = start + len(chosen)
        if len(chosen) < want:
            shortfall.append({"bus_size": size, "regime": regime, "topology": topo, "split": split,
                              "requested": want, "available": len(chosen)})
        picked[i] = ManifestCell(size, regime, topo, split, want, [e["path"] for e in chosen])
    cells = [picked[i] for i in range(len(base))]
    if strict and shortfall:
        raise ShortfallError(shortfall)
    return DatasetManifest(task=task_id, scale=scale, cells=cells, shortfall=shortfall)
