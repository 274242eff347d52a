"""In-process communication fabric for simulated ranks.

Ranks are ordinary threads (or a single caller for singleton groups). Every
collective is a blocking rendezvous over the full member set of a
:class:`Group`; the last member to arrive computes the result for everyone,
so results never depend on thread scheduling. Each completed call is recorded
in the fabric's :class:`CommLedger`.
"""

from __future__ import annotations

import csv
import io
import json
import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Sequence

import numpy as np

# Width of the integers exchanged ahead of variable-count collectives.
COUNT_WIDTH = 8


class Phase(str, Enum):
    FORWARD = "forward"
    RECOMPUTE = "recompute"
    BACKWARD = "backward"
    GRAD_SYNC = "grad-sync"
    OPTIM = "optim"


class GroupKind(str, Enum):
    TENSOR = "tensor"
    EXPERT = "expert"
    DATA_EXP = "data-exp"
    DATA_NONEXP = "data-nonexp"


class Op(str, Enum):
    ALL_REDUCE = "all-reduce"
    ALL_GATHER = "all-gather"
    ALL_TO_ALL = "all-to-all"


class Width(IntEnum):
    """Declared storage width in bytes. Arithmetic is always float64."""

    HALF = 2
    SINGLE = 4
    WIDE = 8


class FabricError(RuntimeError):
    pass


class InvalidConfigError(ValueError):
    pass


class InvalidGroupError(FabricError):
    pass


class ProtocolError(FabricError):
    pass


class CollectiveTimeout(FabricError):
    pass


@dataclass(frozen=True)
class Group:
    id: int
    members: tuple[int, ...]
    kind: GroupKind

    @property
    def size(self) -> int:
        return len(self.members)

    def index(self, rank: int) -> int:
        try:
            return self.members.index(rank)
        except ValueError:
            raise ProtocolError(f"rank {rank} is not a member of group {self.members}") from None


@dataclass
class LedgerEntry:
    rank_calls: Counter = field(default_factory=Counter)
    payload_bytes: int = 0
    metadata_bytes: int = 0

    @property
    def calls(self) -> int:
        # Calls issued by each participating rank; SPMD programs issue the same count everywhere.
        return max(self.rank_calls.values(), default=0)


_PHASE_ORDER = {p: i for i, p in enumerate(Phase)}
_KIND_ORDER = {k: i for i, k in enumerate(GroupKind)}
_OP_ORDER = {o: i for i, o in enumerate(Op)}

RECORD_FIELDS = ("phase", "group_kind", "op", "calls", "payload_bytes", "metadata_bytes")


class CommLedger:
    """Call counts and byte totals keyed by (phase, group kind, op).

    ``payload_bytes`` sums, over every member of every call, the elements that
    member contributed times the declared width. Count exchanges that precede
    variable-count collectives go to ``metadata_bytes``.
    """

    def __init__(self) -> None:
        self.entries: dict[tuple[Phase, GroupKind, Op], LedgerEntry] = {}

    def record(self, phase: Phase, group: Group, op: Op, payload: int, metadata: int = 0) -> None:
        entry = self.entries.setdefault((Phase(phase), group.kind, op), LedgerEntry())
        for r in group.members:
            entry.rank_calls[r] += 1
        entry.payload_bytes += payload
        entry.metadata_bytes += metadata

    def reset(self) -> None:
        self.entries.clear()

    def calls(self, *, phase=None, kind=None, op=None) -> int:
        return sum(e.calls for k, e in self._select(phase, kind, op))

    def payload_bytes(self, *, phase=None, kind=None, op=None) -> int:
        return sum(e.payload_bytes for k, e in self._select(phase, kind, op))

    def metadata_bytes(self, *, phase=None, kind=None, op=None) -> int:
        return sum(e.metadata_bytes for k, e in self._select(phase, kind, op))

    def _select(self, phase, kind, op):
        phases = _as_set(phase, Phase)
        kinds = _as_set(kind, GroupKind)
        ops = _as_set(op, Op)
        for key, entry in self.entries.items():
            p, k, o = key
            if (phases is None or p in phases) and (kinds is None or k in kinds) and (ops is None or o in ops):
                yield key, entry

    def records(self) -> list[dict]:
        keys = sorted(self.entries, key=lambda k: (_PHASE_ORDER[k[0]], _KIND_ORDER[k[1]], _OP_ORDER[k[2]]))
        out = []
        for p, k, o in keys:
            e = self.entries[(p, k, o)]
            out.append(
                {
                    "phase": p.value,
                    "group_kind": k.value,
                    "op": o.value,
                    "calls": e.calls,
                    "payload_bytes": e.payload_bytes,
                    "metadata_bytes": e.metadata_bytes,
                }
            )
        return out

    def to_json(self) -> str:
        return json.dumps(self.records(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=RECORD_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.records())
        return buf.getvalue()


def _as_set(value, enum_cls):
    if value is None:
        return None
    if isinstance(value, (str, Enum)):
        return {enum_cls(value)}
    return {enum_cls(v) for v in value}


class _Slot:
    __slots__ = ("op", "contrib", "result", "error", "done", "readers")

    def __init__(self, op: Op) -> None:
        self.op = op
        self.contrib: dict[int, object] = {}
        self.result = None
        self.error: Exception | None = None
        self.done = False
        self.readers = 0


class Fabric:
    """A world of ``world_size`` simulated ranks sharing one ledger."""

    def __init__(self, world_size: int, timeout: float = 60.0) -> None:
        if world_size < 1:
            raise InvalidConfigError(f"world_size must be >= 1, got {world_size}")
        self.world_size = world_size
        self.timeout = timeout
        self.ledger = CommLedger()
        self.groups: list[Group] = []
        self._cond = threading.Condition()
        self._slots: dict[tuple[int, int], _Slot] = {}
        self._seq: Counter = Counter()

    @property
    def ranks(self) -> range:
        return range(self.world_size)

    def new_group(self, ranks: Sequence[int], kind: GroupKind | str) -> Group:
        members = tuple(int(r) for r in ranks)
        if not members:
            raise InvalidGroupError("a group needs at least one rank")
        if len(set(members)) != len(members):
            raise InvalidGroupError(f"duplicate rank in group {members}")
        bad = [r for r in members if not 0 <= r < self.world_size]
        if bad:
            raise InvalidGroupError(f"ranks {bad} outside world of size {self.world_size}")
        with self._cond:
            group = Group(len(self.groups), members, GroupKind(kind))
            self.groups.append(group)
        return group

    # -- collectives -------------------------------------------------------

    def all_reduce(self, group: Group, rank: int, buffer, phase: Phase | str, width: int = Width.HALF) -> np.ndarray:
        buf = np.asarray(buffer, dtype=np.float64)

        def combine(contrib):
            shapes = {np.shape(contrib[r]) for r in group.members}
            if len(shapes) != 1:
                raise ProtocolError(f"all_reduce shape mismatch across members: {sorted(shapes)}")
            acc = contrib[group.members[0]].copy()
            for r in group.members[1:]:
                acc = acc + contrib[r]
            payload = buf.size * int(width) * group.size
            return acc, payload, 0

        out = self._rendezvous(group, rank, Op.ALL_REDUCE, phase, buf, combine)
        return out.copy()

    def all_gather(self, group: Group, rank: int, local, phase: Phase | str, width: int = Width.HALF) -> np.ndarray:
        """Concatenate equal-length member buffers along axis 0, in group order."""
        buf = np.asarray(local, dtype=np.float64)

        def combine(contrib):
            shapes = {np.shape(contrib[r]) for r in group.members}
            if len(shapes) != 1:
                raise ProtocolError(f"all_gather needs equal-length buffers, got {sorted(shapes)}")
            parts = [contrib[r] for r in group.members]
            payload = sum(p.size for p in parts) * int(width)
            return np.concatenate(parts, axis=0), payload, 0

        out = self._rendezvous(group, rank, Op.ALL_GATHER, phase, buf, combine)
        return out.copy()

    def all_gather_v(self, group: Group, rank: int, local, phase: Phase | str, width: int = Width.HALF) -> list[np.ndarray]:
        """All-gather with per-member lengths; lengths are exchanged first (metadata)."""
        buf = np.asarray(local, dtype=np.float64)

        def combine(contrib):
            trailing = {np.shape(contrib[r])[1:] for r in group.members}
            if len(trailing) != 1:
                raise ProtocolError(f"all_gather_v row shapes differ: {sorted(trailing)}")
            parts = [contrib[r] for r in group.members]
            payload = sum(p.size for p in parts) * int(width)
            return parts, payload, group.size * group.size * COUNT_WIDTH

        out = self._rendezvous(group, rank, Op.ALL_GATHER, phase, buf, combine)
        return [p.copy() for p in out]

    def all_to_all_v(self, group: Group, rank: int, send_segments, phase: Phase | str, width: int = Width.HALF) -> list[np.ndarray]:
        """Member ``i`` sends ``send_segments[j]`` to member ``j``.

        Returns one array per source member, in group order. Segment lengths
        may differ; they are exchanged first and ledgered as metadata.
        """
        segs = [np.asarray(s, dtype=np.float64) for s in send_segments]
        if len(segs) != group.size:
            raise ProtocolError(f"expected {group.size} segments, got {len(segs)}")

        def combine(contrib):
            trailing = {np.shape(s)[1:] for r in group.members for s in contrib[r]}
            if len(trailing) > 1:
                raise ProtocolError(f"all_to_all_v row shapes differ: {sorted(trailing)}")
            received = {
                dst: [contrib[src][j] for src in group.members] for j, dst in enumerate(group.members)
            }
            payload = sum(s.size for r in group.members for s in contrib[r]) * int(width)
            return received, payload, group.size * group.size * COUNT_WIDTH

        out = self._rendezvous(group, rank, Op.ALL_TO_ALL, phase, segs, combine)
        return [s.copy() for s in out[rank]]

    def _rendezvous(self, group: Group, rank: int, op: Op, phase, payload, combine: Callable):
        phase = Phase(phase)
        group.index(rank)
        deadline = self.timeout
        with self._cond:
            seq = self._seq[(group.id, rank)]
            self._seq[(group.id, rank)] += 1
            key = (group.id, seq)
            slot = self._slots.get(key)
            if slot is None:
                slot = self._slots[key] = _Slot(op)
            if slot.op != op:
                slot.error = ProtocolError(
                    f"group {group.members} call #{seq}: rank {rank} issued {op.value}, others {slot.op.value}"
                )
                slot.done = True
                self._cond.notify_all()
            elif not slot.done:
                slot.contrib[rank] = payload
                if len(slot.contrib) == group.size:
                    try:
                        slot.result, nbytes, meta = combine(slot.contrib)
                        self.ledger.record(phase, group, op, nbytes, meta)
                    except ProtocolError as exc:
                        slot.error = exc
                    slot.done = True
                    self._cond.notify_all()
                else:
                    if not self._cond.wait_for(lambda: slot.done, timeout=deadline):
                        missing = sorted(set(group.members) - set(slot.contrib))
                        slot.error = CollectiveTimeout(
                            f"{op.value} on group {group.members} timed out waiting for ranks {missing}"
                        )
                        slot.done = True
                        self._cond.notify_all()
            slot.readers += 1
            if slot.readers >= group.size or slot.error is not None and slot.readers >= len(slot.contrib):
                self._slots.pop(key, None)
            if slot.error is not None:
                raise slot.error
            return slot.result

    def bind(self, rank: int, phase: Phase | str) -> "RankComm":
        return RankComm(self, rank, Phase(phase))


@dataclass
class RankComm:
    """A rank's view of the fabric for one phase."""

    fabric: Fabric
    rank: int
    phase: Phase

    def all_reduce(self, group: Group, buf, width: int = Width.HALF) -> np.ndarray:
        return self.fabric.all_reduce(group, self.rank, buf, self.phase, width)

    def all_gather(self, group: Group, buf, width: int = Width.HALF) -> np.ndarray:
        return self.fabric.all_gather(group, self.rank, buf, self.phase, width)

    def all_gather_v(self, group: Group, buf, width: int = Width.HALF) -> list[np.ndarray]:
        return self.fabric.all_gather_v(group, self.rank, buf, self.phase, width)

    def all_to_all_v(self, group: Group, segments, width: int = Width.HALF) -> list[np.ndarray]:
        return self.fabric.all_to_all_v(group, self.rank, segments, self.phase, width)


def create_fabric(world_size: int, timeout: float = 60.0) -> Fabric:
    return Fabric(world_size, timeout=timeout)


def run_ranks(fabric: Fabric, fn: Callable[[int], object], ranks: Sequence[int] | None = None) -> list:
    """Run ``fn(rank)`` for each rank on its own thread and return results in rank order.

    The first failure (lowest rank) is re-raised after all threads join.
    """
    ranks = list(fabric.ranks if ranks is None else ranks)
    if len(ranks) == 1:
        return [fn(ranks[0])]
    results: list = [None] * len(ranks)
    errors: list[BaseException | None] = [None] * len(ranks)

    def worker(i: int, r: int) -> None:
        try:
            results[i] = fn(r)
        except BaseException as exc:  # noqa: BLE001 - re-raised below
            errors[i] = exc

    threads = [threading.Thread(target=worker, args=(i, r), name=f"rank-{r}", daemon=True) for i, r in enumerate(ranks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    # A timeout on one rank is usually a symptom; prefer reporting a root cause.
    root = [e for e in errors if e is not None and not isinstance(e, CollectiveTimeout)]
    first = root[0] if root else next((e for e in errors if e is not None), None)
    if first is not None:
        raise first
    return results
