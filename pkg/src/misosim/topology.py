"""MIG slice kinds and the catalog of feasible single-GPU partitions."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

TOTAL_GPCS = 7
TOTAL_MEMORY_UNITS = 8
MAX_SLICES = 7


@dataclass(frozen=True, order=True)
class SliceKind:
    gpc_count: int
    memory_gb: int
    cache_fraction: Fraction
    max_count: int
    memory_units: int

    @property
    def name(self) -> str:
        return f"{self.gpc_count}g.{self.memory_gb}gb"

    @property
    def short(self) -> str:
        return f"{self.gpc_count}g"

    def __repr__(self) -> str:
        return self.short


# One row per MIG profile on a 40 GB A100, largest first.
SLICE_KINDS: tuple[SliceKind, ...] = (
    SliceKind(7, 40, Fraction(8, 8), 1, 8),
    SliceKind(4, 20, Fraction(4, 8), 1, 4),
    SliceKind(3, 20, Fraction(4, 8), 2, 4),
    SliceKind(2, 10, Fraction(2, 8), 3, 2),
    SliceKind(1, 5, Fraction(1, 8), 7, 1),
)
GPC_SIZES: tuple[int, ...] = tuple(k.gpc_count for k in SLICE_KINDS)
_BY_GPC = {k.gpc_count: k for k in SLICE_KINDS}
# Column position of each kind in (7g, 4g, 3g, 2g, 1g) speed vectors.
KIND_INDEX = {k: i for i, k in enumerate(SLICE_KINDS)}

S7G, S4G, S3G, S2G, S1G = SLICE_KINDS


def slice_kind(gpc: int | str) -> SliceKind:
    """Look up a kind by GPC count (``4``) or shorthand (``"4g"``, ``"4g.20gb"``)."""
    if isinstance(gpc, str):
        gpc = int(gpc.split("g", 1)[0])
    try:
        return _BY_GPC[gpc]
    except KeyError:
        raise ValueError(f"no MIG slice with {gpc} GPCs") from None


def smallest_slice_for(mem_gb: float = 0, min_gpc: int = 0) -> Optional[SliceKind]:
    """Smallest kind with at least ``mem_gb`` memory and ``min_gpc`` GPCs."""
    for kind in reversed(SLICE_KINDS):
        if kind.memory_gb >= mem_gb and kind.gpc_count >= min_gpc:
            return kind
    return None


class PartitionConfig:
    """An order-insensitive multiset of slices that fits on one GPU."""

    __slots__ = ("_gpcs",)

    def __init__(self, slices: Iterable[SliceKind | int | str]):
        kinds = [s if isinstance(s, SliceKind) else slice_kind(s) for s in slices]
        gpcs = tuple(sorted((k.gpc_count for k in kinds), reverse=True))
        problems = partition_violations(gpcs)
        if problems:
            raise ValueError(f"infeasible partition {list(gpcs)}: {'; '.join(problems)}")
        self._gpcs = gpcs

    @classmethod
    def _trusted(cls, gpcs: tuple[int, ...]) -> "PartitionConfig":
        obj = cls.__new__(cls)
        obj._gpcs = gpcs
        return obj

    @property
    def gpcs(self) -> tuple[int, ...]:
        """GPC sizes in descending order."""
        return self._gpcs

    @property
    def slices(self) -> tuple[SliceKind, ...]:
        return tuple(_BY_GPC[g] for g in self._gpcs)

    @property
    def total_gpcs(self) -> int:
        return sum(self._gpcs)

    @property
    def memory_units(self) -> int:
        return sum(_BY_GPC[g].memory_units for g in self._gpcs)

    def __len__(self) -> int:
        return len(self._gpcs)

    def __iter__(self):
        return iter(self.slices)

    def count(self, kind: SliceKind) -> int:
        return self._gpcs.count(kind.gpc_count)

    def __eq__(self, other) -> bool:
        return isinstance(other, PartitionConfig) and self._gpcs == other._gpcs

    def __hash__(self) -> int:
        return hash(self._gpcs)

    def __repr__(self) -> str:
        return "{" + ", ".join(f"{g}g" for g in self._gpcs) + "}"

    def label(self) -> str:
        return ",".join(str(g) for g in self._gpcs)


def partition_violations(gpcs: Sequence[int]) -> list[str]:
    """Return the rule violations of a multiset of GPC sizes (empty if feasible)."""
    problems = []
    if not gpcs:
        return ["empty partition"]
    unknown = [g for g in gpcs if g not in _BY_GPC]
    if unknown:
        return [f"unknown slice sizes {unknown}"]
    if sum(gpcs) > TOTAL_GPCS:
        problems.append(f"uses {sum(gpcs)} GPCs > {TOTAL_GPCS}")
    units = sum(_BY_GPC[g].memory_units for g in gpcs)
    if units > TOTAL_MEMORY_UNITS:
        problems.append(f"uses {units} memory units > {TOTAL_MEMORY_UNITS}")
    for kind in SLICE_KINDS:
        n = list(gpcs).count(kind.gpc_count)
        if n > kind.max_count:
            problems.append(f"{n}x {kind.short} exceeds max count {kind.max_count}")
    if 4 in gpcs and 3 in gpcs:
        problems.append("4g and 3g cannot co-exist")
    return problems


class PartitionCatalog:
    """The set of feasible partitions, with per-size listings in a fixed order."""

    def __init__(self, entries: Iterable[PartitionConfig], source: str = "rule-generated"):
        unique = sorted(set(entries), key=lambda p: p.gpcs, reverse=True)
        self.entries: tuple[PartitionConfig, ...] = tuple(unique)
        self.source = source
        self._by_size: dict[int, tuple[PartitionConfig, ...]] = {
            m: tuple(p for p in self.entries if len(p) == m) for m in range(1, MAX_SLICES + 1)
        }

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, item) -> bool:
        if not isinstance(item, PartitionConfig):
            try:
                item = PartitionConfig(item)
            except ValueError:
                return False
        return item in self._by_size.get(len(item), ())

    def of_size(self, m: int) -> tuple[PartitionConfig, ...]:
        return self._by_size[m]


def build_catalog() -> PartitionCatalog:
    """Enumerate every multiset of slice kinds that satisfies the MIG rules."""
    entries = []
    ranges = [range(k.max_count + 1) for k in SLICE_KINDS]
    for counts in itertools.product(*ranges):
        gpcs = tuple(
            g for kind, n in zip(SLICE_KINDS, counts) for g in [kind.gpc_count] * n
        )
        if gpcs and not partition_violations(gpcs):
            entries.append(PartitionConfig._trusted(gpcs))
    return PartitionCatalog(entries, source="rule-generated")


_DEFAULT_CATALOG: Optional[PartitionCatalog] = None


def default_catalog() -> PartitionCatalog:
    global _DEFAULT_CATALOG
    if _DEFAULT_CATALOG is None:
        _DEFAULT_CATALOG = build_catalog()
    return _DEFAULT_CATALOG


def load_catalog(path: str | Path) -> PartitionCatalog:
    """Read a catalog override file: one partition per line, e.g. ``4,2,1``.

    Blank lines and ``#`` comments are skipped. Any infeasible line rejects
    the whole file.
    """
    entries = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            gpcs = [int(tok) for tok in line.split(",")]
            entries.append(PartitionConfig(gpcs))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not entries:
        raise ValueError(f"{path}: no partitions listed")
    return PartitionCatalog(entries, source="file-loaded")


def valid_partitions_of_size(catalog: PartitionCatalog, m: int) -> list[PartitionConfig]:
    if not 1 <= m <= MAX_SLICES:
        raise ValueError(f"partition size must be in 1..{MAX_SLICES}, got {m}")
    return list(catalog.of_size(m))


def _hosts(entry: PartitionConfig, needs: Sequence[SliceKind]) -> bool:
    """True if ``entry`` has a distinct slice at least as large as each need."""
    # Largest need first, each taking the smallest adequate slice: exact
    # because slice kinds are totally ordered by size.
    free = sorted(entry.gpcs)
    for need in sorted((n.gpc_count for n in needs), reverse=True):
        pick = next((i for i, g in enumerate(free) if g >= need), None)
        if pick is None:
            return False
        free.pop(pick)
    return True


def max_spare_slice(
    current: Optional[PartitionConfig],
    pinned_memory: Sequence[float],
    pinned_min_gpc: Optional[Sequence[int]] = None,
    catalog: Optional[PartitionCatalog] = None,
) -> Optional[SliceKind]:
    """Largest slice a GPU could free for a newcomer after repartitioning.

    ``pinned_memory`` holds the memory demand of each resident job and
    ``pinned_min_gpc`` their optional QoS minimum. ``current`` is accepted for
    interface symmetry; the answer depends only on the residents because any
    catalog entry may be chosen on repartition.
    """
    catalog = catalog or default_catalog()
    n = len(pinned_memory)
    if n + 1 > MAX_SLICES:
        return None
    qos = list(pinned_min_gpc) if pinned_min_gpc is not None else [0] * n
    needs = []
    for mem, gpc in zip(pinned_memory, qos):
        need = smallest_slice_for(mem, gpc)
        if need is None:
            return None
        needs.append(need)
    for spare in SLICE_KINDS:
        for entry in catalog.of_size(n + 1):
            if spare.gpc_count in entry.gpcs:
                rest = list(entry.gpcs)
                rest.remove(spare.gpc_count)
                if _hosts(PartitionConfig._trusted(tuple(rest)), needs):
                    return spare
    return None
