"""TED mixture-of-experts layers for one simulated rank, plus the serial oracle.

Every layer is ``a = x + mixer(x)`` (a Megatron-parallel MLP standing in for
self-attention) followed by a feed-forward block. Even-indexed layers route
each token to one expert (top-1, scaled by its gate probability); odd layers
use a dense tensor-parallel feed-forward block.

Forward schedule of an expert layer on one rank::

    1 mixer shard compute        2 all-reduce (tensor)
    3 gate on the full tokens    4 all-to-all dispatch (expert)
    5 expert shard compute       6 all-reduce (tensor)
    7 inverse all-to-all (expert)

With duplicate token dropping (``dtd``) each tensor rank keeps only its
contiguous chunk of tokens before 4 and 7, and an all-gather over the tensor
group follows each all-to-all. Backward mirrors this with the roles of drop
and gather swapped.
"""

from __future__ import annotations

import logging
import warnings
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from tedsim.fabric import Fabric, Group, InvalidConfigError, Phase, RankComm, Width
from tedsim.tensor import (
    Parameter,
    Partition,
    column_parallel_backward,
    column_parallel_forward,
    gelu_backward,
    gelu_forward,
    row_parallel_backward,
    row_parallel_forward,
    seeded_init,
)
from tedsim.topology import TedConfig, TopologyGroups, groups_for_rank

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MoeModelConfig:
    layers: int = 1
    hidden: int = 8
    experts: int = 1
    tokens: int = 8  # per nonexp-data shard
    seed: int = 0

    def __post_init__(self) -> None:
        if self.layers < 1 or self.hidden < 1 or self.experts < 1 or self.tokens < 1:
            raise InvalidConfigError(f"layers, hidden, experts and tokens must be >= 1: {self}")

    @property
    def ffn(self) -> int:
        return 4 * self.hidden

    @staticmethod
    def is_moe_layer(layer: int) -> bool:
        return layer % 2 == 0

    def moe_layers(self) -> list[int]:
        return [l for l in range(self.layers) if self.is_moe_layer(l)]


@dataclass(frozen=True)
class Flags:
    dtd: bool = False
    cac: bool = False
    ckpt: bool = False
    # Test hook: each tensor rank keeps its neighbour's chunk at the dispatch drop.
    corrupt_drop: bool = False

    @property
    def cac_active(self) -> bool:
        return self.cac and self.ckpt


def check_flags(flags: Flags, model: MoeModelConfig, cfg: TedConfig) -> None:
    if flags.cac and not flags.ckpt:
        warnings.warn("cac has no effect without ckpt; ignoring it", stacklevel=2)
    if flags.dtd and model.tokens % cfg.tensor:
        raise InvalidConfigError(
            f"dtd needs tokens per shard ({model.tokens}) divisible by G_tensor ({cfg.tensor})"
        )
    if model.ffn % cfg.tensor:
        raise InvalidConfigError(f"ffn width {model.ffn} not divisible by G_tensor={cfg.tensor}")
    if model.experts != cfg.experts:
        raise InvalidConfigError(f"model has {model.experts} experts but topology expects {cfg.experts}")


# -- parameters ---------------------------------------------------------------


def _param_seed(model: MoeModelConfig, name: str) -> list[int]:
    return [model.seed, zlib.crc32(name.encode())]


def _block_specs(prefix: str, h: int, f: int) -> list[tuple[str, tuple[int, ...], str, float]]:
    return [
        (f"{prefix}.w1", (h, f), "column", h**-0.5),
        (f"{prefix}.b1", (f,), "column", 0.1),
        (f"{prefix}.w2", (f, h), "row", f**-0.5),
        (f"{prefix}.b2", (h,), "none", 0.1),
    ]


def init_params(model: MoeModelConfig, cfg: TedConfig | None = None, rank: int = 0) -> dict[str, Parameter]:
    """Parameters held by ``rank`` in canonical (module) order.

    With ``cfg=None`` this is the full serial model with every expert.
    """
    h, f = model.hidden, model.ffn
    if cfg is None:
        t, parts, experts = 0, 1, range(model.experts)
    else:
        t, e, _ = cfg.coords(rank)
        parts, experts = cfg.tensor, [e]
    params: dict[str, Parameter] = {}

    def add(specs, expert=None):
        for name, shape, kind, scale in specs:
            part = Partition(kind, t if kind != "none" else 0, parts if kind != "none" else 1, expert)
            params[name] = Parameter(name, seeded_init(shape, _param_seed(model, name), part, scale), part)

    for l in range(model.layers):
        add(_block_specs(f"layers.{l}.mixer", h, f))
        if model.is_moe_layer(l):
            add([(f"layers.{l}.gate.w", (h, model.experts), "none", h**-0.5)])
            for e in experts:
                add(_block_specs(f"layers.{l}.experts.{e}", h, f), expert=e)
        else:
            add(_block_specs(f"layers.{l}.ffn", h, f))
    return params


def local_param_counts(model: MoeModelConfig, tensor: int) -> tuple[int, int]:
    """(non-expert, expert) parameter counts held by one rank."""
    h, f = model.hidden, model.ffn
    block = 2 * h * (f // tensor) + f // tensor + h
    nonexp = expert = 0
    for l in range(model.layers):
        nonexp += block
        if model.is_moe_layer(l):
            nonexp += h * model.experts
            expert += block
        else:
            nonexp += block
    return nonexp, expert


def make_batch(model: MoeModelConfig, shards: int, step: int = 0) -> np.ndarray:
    """Global input of ``shards * tokens`` rows for ``step``."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([model.seed, 0xDA7A, step])))
    return rng.standard_normal((shards * model.tokens, model.hidden))


def route(logits: np.ndarray) -> np.ndarray:
    """Top-1 expert per token; ties go to the lowest expert index."""
    return np.argmax(logits, axis=1)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def gate_forward(a: np.ndarray, W_gate: np.ndarray):
    """Return (expert ids, chosen-expert probability, softmax)."""
    s = softmax(a @ W_gate)
    ids = route(s)
    p = s[np.arange(len(ids)), ids]
    return ids, p, s


def gate_backward(a, W_gate, ids, p, s, dp):
    """Grads of ``p`` wrt the gate weight and the input."""
    onehot = np.zeros_like(s)
    onehot[np.arange(len(ids)), ids] = 1.0
    dlogits = (dp * p)[:, None] * (onehot - s)
    return a.T @ dlogits, dlogits @ W_gate.T


# -- token drop / gather -------------------------------------------------------


def drop(x: np.ndarray, index: int, parts: int) -> np.ndarray:
    """Keep the ``index``-th contiguous chunk of tokens."""
    n = len(x)
    if n % parts:
        raise InvalidConfigError(f"{n} tokens cannot be split across {parts} tensor ranks")
    k = n // parts
    return x[index * k : (index + 1) * k]


def gather(comm, group: Group, shard: np.ndarray) -> np.ndarray:
    """Inverse of :func:`drop`: all-gather chunks back in tensor-rank order."""
    if group.size == 1:
        return shard
    return comm.all_gather(group, shard)


# -- CAC-aware comm ------------------------------------------------------------


class StashComm:
    """Wraps a RankComm; records collective outputs or replays them.

    ``stash`` collects outputs in call order during the first forward;
    ``replay`` hands them back, in the same order, during recompute.
    """

    def __init__(self, comm: RankComm, stash: list | None = None, replay: deque | None = None) -> None:
        self.comm = comm
        self.stash = stash
        self.replay = replay

    def _call(self, name, *args):
        if self.replay is not None:
            if not self.replay:
                raise RuntimeError("communication stash exhausted during recompute")
            return self.replay.popleft()
        out = getattr(self.comm, name)(*args)
        if self.stash is not None:
            self.stash.append(out)
        return out

    def all_reduce(self, group, buf, width=Width.HALF):
        return self._call("all_reduce", group, buf, width)

    def all_gather(self, group, buf, width=Width.HALF):
        return self._call("all_gather", group, buf, width)

    def all_gather_v(self, group, buf, width=Width.HALF):
        return self._call("all_gather_v", group, buf, width)

    def all_to_all_v(self, group, segments, width=Width.HALF):
        return self._call("all_to_all_v", group, segments, width)


def _stash_elems(obj) -> int:
    if isinstance(obj, np.ndarray):
        return obj.size
    return sum(_stash_elems(o) for o in obj)


# -- dispatch plan ---------------------------------------------------------------


@dataclass
class DispatchPlan:
    """How one rank's tokens travel to experts and back.

    ``order`` lists kept-token positions sorted by destination expert (stable,
    so ascending token index within each expert). ``recv_counts`` is per
    source member of the expert group; ``gather_counts`` per tensor rank when
    tokens were dropped.
    """

    order: np.ndarray
    send_counts: list[int]
    keep: slice
    dtd: bool
    recv_counts: list[int] = field(default_factory=list)
    gather_counts: list[int] = field(default_factory=list)
    tensor_index: int = 0


@dataclass(frozen=True)
class RankGroupHandles:
    tensor: Group
    expert: Group
    exp_data: Group
    nonexp_data: Group


def make_group_handles(fabric: Fabric, topo: TopologyGroups) -> list[RankGroupHandles]:
    from tedsim.fabric import GroupKind

    made: dict[tuple[str, tuple[int, ...]], Group] = {}
    for name, kind in (
        ("tensor", GroupKind.TENSOR),
        ("expert", GroupKind.EXPERT),
        ("data-exp", GroupKind.DATA_EXP),
        ("data-nonexp", GroupKind.DATA_NONEXP),
    ):
        for members in topo.families()[name]:
            made[(name, members)] = fabric.new_group(members, kind)
    out = []
    for rank in range(topo.cfg.world_size):
        g = groups_for_rank(topo, rank)
        out.append(
            RankGroupHandles(
                tensor=made[("tensor", g.tensor)],
                expert=made[("expert", g.expert)],
                exp_data=made[("data-exp", g.exp_data)],
                nonexp_data=made[("data-nonexp", g.nonexp_data)],
            )
        )
    return out


# -- the rank ---------------------------------------------------------------------


class TedRank:
    """One simulated GPU: its parameter shards and forward/backward for all layers."""

    def __init__(
        self,
        fabric: Fabric,
        model: MoeModelConfig,
        cfg: TedConfig,
        groups: RankGroupHandles,
        rank: int,
        flags: Flags = Flags(),
        params: dict[str, Parameter] | None = None,
        trace: dict | None = None,
    ) -> None:
        self.fabric = fabric
        self.model = model
        self.cfg = cfg
        self.groups = groups
        self.rank = rank
        self.flags = flags
        self.t, self.e, self.d = cfg.coords(rank)
        self.params = params if params is not None else init_params(model, cfg, rank)
        self.trace = trace
        self.dtd = flags.dtd and cfg.tensor > 1 and cfg.experts > 1
        self.global_tokens = model.tokens * cfg.data_nonexp
        self.mem_peak = {"checkpoints": 0, "cac_stash": 0, "activations": 0}

    def p(self, name: str) -> np.ndarray:
        return self.params[name].value

    def acc(self, name: str, g: np.ndarray) -> None:
        self.params[name].grad += g

    def zero_grad(self) -> None:
        for prm in self.params.values():
            prm.zero_grad()

    # -- blocks ----------------------------------------------------------------

    def _tp_mlp_forward(self, comm, prefix: str, x: np.ndarray):
        upre = column_parallel_forward(x, self.p(f"{prefix}.w1"), self.p(f"{prefix}.b1"))
        u = gelu_forward(upre)
        y = row_parallel_forward(comm, self.groups.tensor, u, self.p(f"{prefix}.w2"), self.p(f"{prefix}.b2"))
        return y, (x, upre, u)

    def _tp_mlp_backward(self, comm, prefix: str, cache, dy: np.ndarray) -> np.ndarray:
        x, upre, u = cache
        du, dW2, db2 = row_parallel_backward(u, self.p(f"{prefix}.w2"), dy)
        dupre = gelu_backward(upre, du)
        dx, dW1, db1 = column_parallel_backward(comm, self.groups.tensor, x, self.p(f"{prefix}.w1"), dupre)
        self.acc(f"{prefix}.w1", dW1)
        self.acc(f"{prefix}.b1", db1)
        self.acc(f"{prefix}.w2", dW2)
        self.acc(f"{prefix}.b2", db2)
        return dx

    # -- token movement --------------------------------------------------------

    def _plan(self, ids: np.ndarray) -> DispatchPlan:
        n, T = len(ids), self.cfg.tensor
        if self.dtd:
            k = n // T
            idx = (self.t + 1) % T if self.flags.corrupt_drop else self.t
            keep = slice(idx * k, (idx + 1) * k)
        else:
            keep = slice(0, n)
        kept = ids[keep]
        order = np.argsort(kept, kind="stable")
        counts = np.bincount(kept, minlength=self.cfg.experts).tolist()
        return DispatchPlan(order, counts, keep, self.dtd, tensor_index=self.t)

    def _to_experts(self, comm, rows: np.ndarray, plan: DispatchPlan) -> np.ndarray:
        """Token-ordered rows (replicated over the tensor group) -> rows at this rank's expert."""
        local = rows[plan.keep][plan.order]
        if self.groups.expert.size > 1:
            segs = np.split(local, np.cumsum(plan.send_counts)[:-1])
            recv = comm.all_to_all_v(self.groups.expert, segs)
        else:
            recv = [local]
        plan.recv_counts = [len(r) for r in recv]
        x = np.concatenate(recv, axis=0)
        if plan.dtd:
            parts = comm.all_gather_v(self.groups.tensor, x)
            plan.gather_counts = [len(p) for p in parts]
            x = np.concatenate(parts, axis=0)
        return x

    def _to_sources(self, comm, rows: np.ndarray, plan: DispatchPlan) -> np.ndarray:
        """Expert-side rows -> token-ordered rows on the source ranks (inverse of _to_experts)."""
        if plan.dtd:
            offs = np.concatenate([[0], np.cumsum(plan.gather_counts)])
            rows = rows[offs[plan.tensor_index] : offs[plan.tensor_index + 1]]
        if self.groups.expert.size > 1:
            segs = np.split(rows, np.cumsum(plan.recv_counts)[:-1])
            back = comm.all_to_all_v(self.groups.expert, segs)
        else:
            back = [rows]
        sent = np.concatenate(back, axis=0)
        out = np.empty_like(sent)
        out[plan.order] = sent
        if plan.dtd:
            out = comm.all_gather(self.groups.tensor, out)
        return out

    # -- layers ------------------------------------------------------------------

    def _moe_forward(self, comm, l: int, x: np.ndarray):
        pre = f"layers.{l}"
        y_m, mcache = self._tp_mlp_forward(comm, f"{pre}.mixer", x)
        a = x + y_m
        ids, prob, s = gate_forward(a, self.p(f"{pre}.gate.w"))
        plan = self._plan(ids)
        r = self._to_experts(comm, a, plan)
        if self.trace is not None:
            self.trace.setdefault((l, "dispatched"), r.copy())
            self.trace.setdefault((l, "routing"), ids.copy())
        y_e, ecache = self._tp_mlp_forward(comm, f"{pre}.experts.{self.e}", r)
        y_back = self._to_sources(comm, y_e, plan)
        out = a + prob[:, None] * y_back
        return out, (mcache, a, ids, prob, s, plan, ecache, y_back)

    def _moe_backward(self, comm, l: int, cache, dout: np.ndarray) -> np.ndarray:
        pre = f"layers.{l}"
        mcache, a, ids, prob, s, plan, ecache, y_back = cache
        dp = (dout * y_back).sum(axis=1)
        dWg, da_gate = gate_backward(a, self.p(f"{pre}.gate.w"), ids, prob, s, dp)
        self.acc(f"{pre}.gate.w", dWg)
        dy_e = self._to_experts(comm, prob[:, None] * dout, plan)
        dr = self._tp_mlp_backward(comm, f"{pre}.experts.{self.e}", ecache, dy_e)
        da = dout + da_gate
        da = da + self._to_sources(comm, dr, plan)
        return da + self._tp_mlp_backward(comm, f"{pre}.mixer", mcache, da)

    def _dense_forward(self, comm, l: int, x: np.ndarray):
        pre = f"layers.{l}"
        y_m, mcache = self._tp_mlp_forward(comm, f"{pre}.mixer", x)
        a = x + y_m
        y_f, fcache = self._tp_mlp_forward(comm, f"{pre}.ffn", a)
        return a + y_f, (mcache, fcache)

    def _dense_backward(self, comm, l: int, cache, dout: np.ndarray) -> np.ndarray:
        mcache, fcache = cache
        da = dout + self._tp_mlp_backward(comm, f"layers.{l}.ffn", fcache, dout)
        return da + self._tp_mlp_backward(comm, f"layers.{l}.mixer", mcache, da)

    def layer_forward(self, comm, l: int, x: np.ndarray):
        if self.model.is_moe_layer(l):
            return self._moe_forward(comm, l, x)
        return self._dense_forward(comm, l, x)

    def layer_backward(self, comm, l: int, cache, dout: np.ndarray) -> np.ndarray:
        if self.model.is_moe_layer(l):
            return self._moe_backward(comm, l, cache, dout)
        return self._dense_backward(comm, l, cache, dout)

    # -- a full forward/backward -----------------------------------------------

    def forward_backward(self, x: np.ndarray):
        """Run all layers forward and backward on this rank's token shard.

        Returns (partial loss, output). The partial loss covers this shard's
        tokens and is already divided by the global token count.
        """
        flags, L = self.flags, self.model.layers
        fwd = self.fabric.bind(self.rank, Phase.FORWARD)
        rec = self.fabric.bind(self.rank, Phase.RECOMPUTE)
        bwd = self.fabric.bind(self.rank, Phase.BACKWARD)

        inputs: list[np.ndarray] = []
        caches: list = []
        stashes: list[list] = []
        h = x
        for l in range(L):
            inputs.append(h)
            stash = [] if flags.cac_active else None
            h, cache = self.layer_forward(StashComm(fwd, stash=stash), l, h)
            stashes.append(stash)
            caches.append(None if flags.ckpt else cache)
        out = h
        self._note_memory(inputs, caches, stashes)

        N = self.global_tokens
        loss = float((out**2).sum()) / (2 * N)
        dh = out / N
        for l in reversed(range(L)):
            cache = caches[l]
            if cache is None:
                replay = deque(stashes[l]) if flags.cac_active else None
                _, cache = self.layer_forward(StashComm(rec, replay=replay), l, inputs[l])
                if replay:
                    raise RuntimeError(f"layer {l}: {len(replay)} stashed outputs left unused")
            dh = self.layer_backward(StashComm(bwd), l, cache, dh)
            caches[l] = None
            stashes[l] = None
        return loss, out

    def _note_memory(self, inputs, caches, stashes) -> None:
        w = int(Width.HALF)
        if self.flags.ckpt:
            self.mem_peak["checkpoints"] = max(self.mem_peak["checkpoints"], w * sum(i.size for i in inputs))
        else:
            acts = sum(_cache_elems(c) for c in caches)
            self.mem_peak["activations"] = max(self.mem_peak["activations"], w * acts)
        if self.flags.cac_active:
            st = sum(_stash_elems(s) for s in stashes)
            self.mem_peak["cac_stash"] = max(self.mem_peak["cac_stash"], w * st)

    def nonexpert_params(self) -> list[Parameter]:
        return [p for p in self.params.values() if not p.is_expert]

    def expert_params(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.is_expert]

    def grad_sync(self) -> None:
        """Sum non-expert grads over the nonexp-data group and expert grads over the exp-data group."""
        comm = self.fabric.bind(self.rank, Phase.GRAD_SYNC)
        for params, group in ((self.nonexpert_params(), self.groups.nonexp_data), (self.expert_params(), self.groups.exp_data)):
            if group.size == 1 or not params:
                continue
            flat = np.concatenate([p.grad.ravel() for p in params])
            flat = comm.all_reduce(group, flat)
            unflatten_into(flat, params, attr="grad")


def _cache_elems(obj) -> int:
    if isinstance(obj, np.ndarray):
        return obj.size
    if isinstance(obj, DispatchPlan) or obj is None:
        return 0
    if isinstance(obj, (tuple, list)):
        return sum(_cache_elems(o) for o in obj)
    return 0


def flatten(params: Iterable[Parameter], attr: str = "value") -> np.ndarray:
    arrays = [getattr(p, attr).ravel() for p in params]
    return np.concatenate(arrays) if arrays else np.zeros(0)


def unflatten_into(flat: np.ndarray, params: Iterable[Parameter], attr: str = "value") -> None:
    off = 0
    for p in params:
        n = p.value.size
        setattr(p, attr, flat[off : off + n].reshape(p.value.shape).copy())
        off += n
    if off != flat.size:
        raise ValueError(f"flat buffer has {flat.size} elements, parameters need {off}")


# -- serial oracle ---------------------------------------------------------------


@dataclass
class SerialResult:
    loss: float
    grads: dict[str, np.ndarray]
    output: np.ndarray
    routing: dict[int, np.ndarray]


def serial_reference_step(model: MoeModelConfig, batch: np.ndarray, params: dict[str, Parameter] | None = None) -> SerialResult:
    """Single-process forward/backward of the full model (all experts local, no collectives)."""
    from tedsim.tensor import linear_backward, linear_forward

    P = params if params is not None else init_params(model)
    v = {k: p.value for k, p in P.items()}
    grads = {k: np.zeros_like(p.value) for k, p in P.items()}
    N = len(batch)

    def mlp_fwd(prefix, x):
        upre = linear_forward(x, v[f"{prefix}.w1"], v[f"{prefix}.b1"])
        u = gelu_forward(upre)
        y = linear_forward(u, v[f"{prefix}.w2"]) + v[f"{prefix}.b2"]
        return y, (x, upre, u)

    def mlp_bwd(prefix, cache, dy):
        x, upre, u = cache
        du, dW2, db2 = linear_backward(u, v[f"{prefix}.w2"], dy)
        dupre = gelu_backward(upre, du)
        dx, dW1, db1 = linear_backward(x, v[f"{prefix}.w1"], dupre)
        for suffix, g in (("w1", dW1), ("b1", db1), ("w2", dW2), ("b2", db2)):
            grads[f"{prefix}.{suffix}"] += g
        return dx

    caches = []
    routing = {}
    h = batch
    for l in range(model.layers):
        pre = f"layers.{l}"
        y_m, mc = mlp_fwd(f"{pre}.mixer", h)
        a = h + y_m
        if model.is_moe_layer(l):
            ids, prob, s = gate_forward(a, v[f"{pre}.gate.w"])
            routing[l] = ids
            y_back = np.zeros_like(a)
            ecaches = {}
            for e in range(model.experts):
                idx = np.flatnonzero(ids == e)
                y_e, ecaches[e] = mlp_fwd(f"{pre}.experts.{e}", a[idx])
                y_back[idx] = y_e
            h = a + prob[:, None] * y_back
            caches.append(("moe", mc, a, ids, prob, s, ecaches, y_back))
        else:
            y_f, fc = mlp_fwd(f"{pre}.ffn", a)
            h = a + y_f
            caches.append(("dense", mc, fc))
    out = h
    loss = float((out**2).sum()) / (2 * N)

    dh = out / N
    for l in reversed(range(model.layers)):
        pre = f"layers.{l}"
        c = caches[l]
        if c[0] == "moe":
            _, mc, a, ids, prob, s, ecaches, y_back = c
            dp = (dh * y_back).sum(axis=1)
            dWg, da_gate = gate_backward(a, v[f"{pre}.gate.w"], ids, prob, s, dp)
            grads[f"{pre}.gate.w"] += dWg
            dy = prob[:, None] * dh
            da_exp = np.zeros_like(a)
            for e in range(model.experts):
                idx = np.flatnonzero(ids == e)
                da_exp[idx] = mlp_bwd(f"{pre}.experts.{e}", ecaches[e], dy[idx])
            da = dh + da_gate
            da = da + da_exp
        else:
            _, mc, fc = c
            da = dh + mlp_bwd(f"{pre}.ffn", fc, dh)
        dh = da + mlp_bwd(f"{pre}.mixer", mc, da)
    return SerialResult(loss, grads, out, routing)
