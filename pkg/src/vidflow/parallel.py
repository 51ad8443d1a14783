"""Single-host equivalence simulations of the two parallelism strategies.

Both simulations execute the real data movement (scatter, all-to-all,
all-gather, reduce-scatter) on in-process arrays, count the bytes each
collective would move, and must reproduce the unsharded computation:

- Ulysses sequence parallelism: inputs are sharded by sequence; two
  all-to-alls exchange them so each worker attends over the full sequence
  for a subset of heads.  Non-conforming lengths are padded and the padded
  keys masked out.
- Sharded data parallelism: parameters are sharded inside each group and
  replicated across groups.  Parameters are all-gathered twice per step
  (forward, then backward re-gather after resharding), gradients are
  reduce-scattered within the group and shard-wise all-reduced across
  groups.  Mean gradient reduction over the global batch.

Reductions accumulate in sorted worker-id order, so permuting the order in
which virtual workers execute cannot change a single bit of the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .nn import zero_grads
from .tensor import GradTape, backward


@dataclass
class CommCounter:
    """Bytes moved by each collective family."""

    all_to_all: int = 0
    all_gather: int = 0
    reduce_scatter: int = 0
    cross_group: int = 0

    @property
    def total(self) -> int:
        return self.all_to_all + self.all_gather + self.reduce_scatter + self.cross_group


def split_ranges(total: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous ranges covering [0, total); first ranges absorb remainders."""
    base, extra = divmod(total, parts)
    bounds = [0]
    for i in range(parts):
        bounds.append(bounds[-1] + base + (1 if i < extra else 0))
    return [(bounds[i], bounds[i + 1]) for i in range(parts)]


@dataclass(frozen=True)
class ShardLayout:
    """Sequence shards (with padding) and disjoint head ranges per worker."""

    workers: int
    seq_len: int
    heads: int
    pad: int
    seq_shards: tuple
    head_shards: tuple


def make_layout(workers: int, seq_len: int, heads: int) -> ShardLayout:
    if workers < 1:
        raise ContractError(f"workers must be >= 1, got {workers}")
    if heads < workers:
        raise ContractError(f"cannot split {heads} heads across {workers} workers")
    padded = ((seq_len + workers - 1) // workers) * workers
    return ShardLayout(
        workers=workers, seq_len=seq_len, heads=heads, pad=padded - seq_len,
        seq_shards=tuple(split_ranges(padded, workers)),
        head_shards=tuple(split_ranges(heads, workers)))


def plain_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                    key_valid: np.ndarray | None = None) -> np.ndarray:
    """Reference softmax(q k^T / sqrt(d)) v on [H, L, d] arrays."""
    d = q.shape[-1]
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(d)
    if key_valid is not None:
        scores = np.where(key_valid[None, None, :], scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v


def sp_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, layout: ShardLayout,
                 counter: CommCounter | None = None,
                 worker_order=None) -> np.ndarray:
    """Sequence-parallel attention; output equals plain_attention(q, k, v)."""
    heads, seq_len, dim = q.shape
    if heads != layout.heads or seq_len != layout.seq_len:
        raise ContractError(f"layout ({layout.heads} heads, {layout.seq_len} tokens) "
                            f"does not match input {q.shape}")
    counter = counter if counter is not None else CommCounter()
    order = list(worker_order) if worker_order is not None else list(range(layout.workers))
    if sorted(order) != list(range(layout.workers)):
        raise ContractError("worker_order must be a permutation of all workers")

    padded = seq_len + layout.pad
    key_valid = np.zeros(padded, dtype=bool)
    key_valid[:seq_len] = True

    def pad(x):
        out = np.zeros((heads, padded, dim))
        out[:, :seq_len] = x
        return out

    qp, kp, vp = pad(q), pad(k), pad(v)
    # each worker starts with its sequence shard of all heads
    seq_held = {w: (qp[:, s:e], kp[:, s:e], vp[:, s:e])
                for w, (s, e) in enumerate(layout.seq_shards)}

    # all-to-all #1: full sequence, own heads
    gathered = {}
    for w in order:
        hs, he = layout.head_shards[w]
        parts_q = np.empty((he - hs, padded, dim))
        parts_k = np.empty((he - hs, padded, dim))
        parts_v = np.empty((he - hs, padded, dim))
        for u in range(layout.workers):
            s, e = layout.seq_shards[u]
            uq, uk, uv = seq_held[u]
            parts_q[:, s:e] = uq[hs:he]
            parts_k[:, s:e] = uk[hs:he]
            parts_v[:, s:e] = uv[hs:he]
            if u != w:
                counter.all_to_all += 3 * (he - hs) * (e - s) * dim * 8
        gathered[w] = (parts_q, parts_k, parts_v)

    # local attention over the full (masked) sequence
    outputs = {w: plain_attention(*gathered[w], key_valid=key_valid) for w in order}

    # all-to-all #2: back to sequence shards with all heads
    result = np.zeros((heads, padded, dim))
    for w in order:
        hs, he = layout.head_shards[w]
        for u in range(layout.workers):
            s, e = layout.seq_shards[u]
            result[hs:he, s:e] = outputs[w][:, s:e]
            if u != w:
                counter.all_to_all += (he - hs) * (e - s) * dim * 8
    return result[:, :seq_len]


@dataclass(frozen=True)
class ShardGroup:
    """group_size workers shard parameters; replicas groups hold copies."""

    group_size: int
    replicas: int

    def __post_init__(self):
        if self.group_size < 1 or self.replicas < 1:
            raise ContractError("group_size and replicas must be >= 1")

    @property
    def world(self) -> int:
        return self.group_size * self.replicas


@dataclass
class FsdpResult:
    grads: dict
    counter: CommCounter
    per_worker_micro: int = 0


def _flatten(named: dict) -> np.ndarray:
    return np.concatenate([np.asarray(named[n]).ravel() for n in sorted(named)])


def _unflatten(vec: np.ndarray, template: dict) -> dict:
    out, off = {}, 0
    for name in sorted(template):
        size = template[name].size
        out[name] = vec[off:off + size].reshape(template[name].shape)
        off += size
    return out


def single_worker_grads(model, batch: list, loss_fn) -> dict:
    """Oracle: mean-reduced gradient of loss_fn over the whole batch."""
    params = model.params()
    zero_grads(params)
    with GradTape():
        backward(loss_fn(model, batch))
    grads = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values))
             for n, p in params.items()}
    zero_grads(params)
    return grads


def fsdp_sim_step(model, batch: list, loss_fn, group: ShardGroup,
                  counter: CommCounter | None = None,
                  worker_order=None) -> FsdpResult:
    """Simulate hybrid-sharded data parallelism for one step.

    loss_fn(model, sub_batch) must mean-reduce over its samples; the global
    batch must divide evenly across workers so mean-of-means equals the
    full-batch mean.
    """
    counter = counter if counter is not None else CommCounter()
    world = group.world
    if len(batch) % world != 0:
        raise ContractError(f"batch of {len(batch)} not divisible by {world} workers")
    micro = len(batch) // world
    order = list(worker_order) if worker_order is not None else list(range(world))
    if sorted(order) != list(range(world)):
        raise ContractError("worker_order must be a permutation of all workers")

    params = model.params()
    values = {n: p.values for n, p in params.items()}
    flat_size = sum(v.size for v in values.values())
    shard_bounds = split_ranges(flat_size, group.group_size)

    # per-worker micro-batch gradients (parameters all-gathered twice:
    # forward gather + backward re-gather after resharding)
    worker_grads = {}
    for w in order:
        pos = w % group.group_size
        own = shard_bounds[pos][1] - shard_bounds[pos][0]
        counter.all_gather += 2 * (flat_size - own) * 8
        zero_grads(params)
        with GradTape():
            backward(loss_fn(model, batch[w * micro:(w + 1) * micro]))
        worker_grads[w] = _flatten(
            {n: (p.grad if p.grad is not None else np.zeros_like(p.values))
             for n, p in params.items()})
        zero_grads(params)

    # reduce-scatter inside each shard group (sorted accumulation order)
    shard_sums = {}  # (replica, shard position) -> summed shard
    for rep in range(group.replicas):
        members = [rep * group.group_size + j for j in range(group.group_size)]
        for pos, (s, e) in enumerate(shard_bounds):
            acc = np.zeros(e - s)
            for m in sorted(members):
                acc += worker_grads[m][s:e]
            shard_sums[(rep, pos)] = acc
            counter.reduce_scatter += (group.group_size - 1) * (e - s) * 8
    # all-reduce each shard position across replica groups
    full = np.zeros(flat_size)
    for pos, (s, e) in enumerate(shard_bounds):
        acc = np.zeros(e - s)
        for rep in range(group.replicas):
            acc += shard_sums[(rep, pos)]
        counter.cross_group += 2 * (e - s) * (group.replicas - 1) * 8
        full[s:e] = acc / world  # mean over all workers
    return FsdpResult(grads=_unflatten(full, values), counter=counter,
                      per_worker_micro=micro)
