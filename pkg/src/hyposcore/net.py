"""Point-set scoring networks with hand-derived gradients.

Two architectures operating on per-hypothesis point-difference sets:

* ``pointnetpp``: hierarchical set abstraction,
  SA(128, 0.2, [16, 32]) -> SA(16, 0.5, [32, 64]) -> SA([64, 128])
  -> FC(64, 0.4) -> FC(16, 0.4) -> FC(1)
* ``pointnet``: global structure, per-point MLP (16, 16, 16) -> max-pool
  bottleneck of width 16 -> MLP (64, 64) -> score

Every fully connected layer is followed by batch norm and ReLU except the
final score layer. Grouping uses the normalized image coordinates. In eval
mode the rows of each input set are canonicalized (lexicographic sort), so
scores are exactly permutation invariant; batch norm uses running statistics
in eval mode and batch statistics in train mode.

Gradients are written out per layer (linear, batch norm, ReLU, dropout,
max-pool-with-argmax, gather/group) and verified against central finite
differences in the test suite.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

DEFAULT_CHANNELS = ("u_norm", "v_norm", "dh", "ds", "dv", "dd", "ncos")
COORD_LABELS = ("u_norm", "v_norm")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
MAX_GROUP_SIZE = 32
FC_DROPOUT = 0.4

MAGIC = b"ZPHW"
VERSION = 1
_META_CHANNELS = "__meta__.channels"


@dataclass
class NetworkWeights:
    """Named-tensor container for a scoring network."""

    arch: str
    tensors: dict
    channels: tuple = DEFAULT_CHANNELS

    def astype(self, dtype) -> "NetworkWeights":
        return NetworkWeights(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.channels)

    def param_names(self) -> list:
        """Trainable tensors (excludes batch-norm running statistics)."""
        return [k for k in self.tensors if not (k.endswith(".mean") or k.endswith(".var"))]


def _arch_plan(arch: str, n_channels: int) -> dict:
    if arch == "pointnetpp":
        return {
            "sa": [
                {"name": "sa1", "k": 128, "r": 0.2, "in": n_channels + 2, "widths": (16, 32)},
                {"name": "sa2", "k": 16, "r": 0.5, "in": 32 + 2, "widths": (32, 64)},
            ],
            "global": {"name": "sag", "in": 64 + 2, "widths": (64, 128)},
            "fc": [
                {"name": "fc0", "in": 128, "out": 64, "dropout": FC_DROPOUT, "bn": True},
                {"name": "fc1", "in": 64, "out": 16, "dropout": FC_DROPOUT, "bn": True},
                {"name": "fc2", "in": 16, "out": 1, "dropout": None, "bn": False},
            ],
        }
    if arch == "pointnet":
        return {
            "pre": [
                {"name": "pn0", "in": n_channels, "out": 16},
                {"name": "pn1", "in": 16, "out": 16},
                {"name": "pn2", "in": 16, "out": 16},
            ],
            "fc": [
                {"name": "head0", "in": 16, "out": 64, "dropout": None, "bn": True},
                {"name": "head1", "in": 64, "out": 64, "dropout": None, "bn": True},
                {"name": "head2", "in": 64, "out": 1, "dropout": None, "bn": False},
            ],
        }
    raise ValueError(f"unknown architecture {arch!r}")


def expected_shapes(arch: str, channels=DEFAULT_CHANNELS) -> dict:
    plan = _arch_plan(arch, len(channels))
    shapes = {}

    def add_linear(name, cin, cout, bn):
        shapes[f"{name}.w"] = (cin, cout)
        shapes[f"{name}.b"] = (cout,)
        if bn:
            for suffix in ("scale", "shift", "mean", "var"):
                shapes[f"{name}.bn.{suffix}"] = (cout,)

    for sa in plan.get("sa", []):
        cin = sa["in"]
        for i, w in enumerate(sa["widths"]):
            add_linear(f"{sa['name']}.mlp{i}", cin, w, bn=True)
            cin = w
    if "global" in plan:
        g = plan["global"]
        cin = g["in"]
        for i, w in enumerate(g["widths"]):
            add_linear(f"{g['name']}.mlp{i}", cin, w, bn=True)
            cin = w
    for layer in plan.get("pre", []):
        add_linear(layer["name"], layer["in"], layer["out"], bn=True)
    for layer in plan["fc"]:
        add_linear(layer["name"], layer["in"], layer["out"], bn=layer["bn"])
    return shapes


def init_weights(arch: str, rng, channels=DEFAULT_CHANNELS, dtype=np.float32) -> NetworkWeights:
    """Kaiming-uniform linear layers; batch norm scale 1 / shift 0."""
    rng = np.random.default_rng(rng)
    tensors = {}
    for name, shape in expected_shapes(arch, channels).items():
        if name.endswith(".w"):
            fan_in = shape[0]
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif name.endswith(".b"):
            fan_in = tensors[name[:-2] + ".w"].shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif name.endswith(".scale"):
            tensors[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".var"):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return NetworkWeights(arch=arch, tensors=tensors, channels=tuple(channels))


def validate_shapes(w: NetworkWeights) -> None:
    expected = expected_shapes(w.arch, w.channels)
    for name, shape in expected.items():
        if name not in w.tensors:
            raise ValueError(f"weights missing tensor {name!r}")
        if tuple(w.tensors[name].shape) != shape:
            raise ValueError(f"tensor {name!r} has shape {w.tensors[name].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# sampling and grouping


def farthest_point_sample(coords: np.ndarray, k: int) -> np.ndarray:
    """Deterministic farthest point sampling starting from index 0.

    If fewer than k points exist, the selection cycles with repetition.
    """
    n = len(coords)
    if n == 0:
        raise ValueError("cannot sample an empty set")
    sel = fps_batch([np.asarray(coords, dtype=np.float64)], k)
    return sel[0]


def fps_batch(coord_sets: list, k: int) -> np.ndarray:
    """Farthest point sampling over a batch of variable-size coordinate sets."""
    b = len(coord_sets)
    lens = np.array([len(c) for c in coord_sets])
    nmax = int(lens.max())
    pts = np.zeros((b, nmax, 2))
    for i, c in enumerate(coord_sets):
        pts[i, : lens[i]] = c
        if lens[i] < nmax:
            pts[i, lens[i] :] = c[0]  # pads duplicate point 0: never farthest

    sel = np.zeros((b, k), dtype=np.int32)
    mind = np.full((b, nmax), np.inf)
    last = pts[:, 0, :]
    for j in range(1, k):
        d = pts - last[:, None, :]
        np.minimum(mind, d[..., 0] ** 2 + d[..., 1] ** 2, out=mind)
        nxt = np.argmax(mind, axis=1).astype(np.int32)
        sel[:, j] = nxt
        last = pts[np.arange(b), nxt]

    for i in np.nonzero(lens < k)[0]:
        n = int(lens[i])
        sel[i] = sel[i, np.arange(k) % n]
    return sel


def ball_query(centroids: np.ndarray, coords: np.ndarray, r: float, max_n: int) -> np.ndarray:
    """Indices of up to max_n points strictly within r of each centroid,
    in first-found order. Partially filled rows repeat their first member;
    empty rows repeat the centroid's nearest point."""
    if r <= 0:
        raise ValueError("radius must be positive")
    out = ball_query_batch(
        np.asarray(centroids, dtype=np.float64)[None], [np.asarray(coords, dtype=np.float64)], r, max_n
    )
    return out[0]


def ball_query_batch(centroids: np.ndarray, coord_sets: list, r: float, max_n: int) -> np.ndarray:
    """Batched ball query; centroids (B, K, 2), per-set coords of varying N."""
    b, k, _ = centroids.shape
    out = np.zeros((b, k, max_n), dtype=np.int32)
    r2 = r * r
    for i in range(b):
        pts = coord_sets[i]
        d = centroids[i][:, None, :] - pts[None, :, :]
        d2 = d[..., 0] ** 2 + d[..., 1] ** 2  # (K, N)
        mask = d2 < r2
        rank = np.cumsum(mask, axis=1) - 1
        valid = mask & (rank < max_n)
        counts = np.minimum(mask.sum(axis=1), max_n)

        ki, ni = np.nonzero(valid)
        out[i][ki, rank[ki, ni]] = ni

        empty = counts == 0
        if empty.any():
            out[i][empty, 0] = np.argmin(d2[empty], axis=1)
            counts = np.maximum(counts, 1)
        slot = np.arange(max_n)[None, :]
        fill = slot >= counts[:, None]
        first = out[i][:, 0:1]
        out[i] = np.where(fill, first, out[i])
    return out


@dataclass
class GroupPlan:
    """Precomputed grouping for the hierarchical architecture.

    All indices are local to each set; sa2 indices address SA1 centroids.
    """

    sa1_centroids: np.ndarray  # (B, 128)
    sa1_groups: np.ndarray     # (B, 128, max_n)
    sa2_centroids: np.ndarray  # (B, 16)
    sa2_groups: np.ndarray     # (B, 16, max_n)


def build_group_plan(coord_sets: list, arch_plan=None) -> GroupPlan:
    plan = arch_plan or _arch_plan("pointnetpp", len(DEFAULT_CHANNELS))
    sa1, sa2 = plan["sa"]
    c1 = fps_batch(coord_sets, sa1["k"])
    g1 = ball_query_batch(
        np.stack([coord_sets[i][c1[i]] for i in range(len(coord_sets))]),
        coord_sets,
        sa1["r"],
        MAX_GROUP_SIZE,
    )
    coords1 = [coord_sets[i][c1[i]] for i in range(len(coord_sets))]
    c2 = fps_batch(coords1, sa2["k"])
    g2 = ball_query_batch(
        np.stack([coords1[i][c2[i]] for i in range(len(coords1))]),
        coords1,
        sa2["r"],
        MAX_GROUP_SIZE,
    )
    return GroupPlan(c1, g1, c2, g2)


# ---------------------------------------------------------------------------
# layer primitives (forward + hand-derived backward)


def _linear_fwd(x, w, b):
    y = x @ w
    y += b
    return y, (x, w)


def _linear_bwd(cache, gy):
    x, w = cache
    return gy @ w.T, x.T @ gy, gy.sum(axis=0)


def _bn_relu_fwd(weights, name, x, mode, update_running):
    """Fused batch norm + ReLU via the kernel backend; consumes x (it becomes
    xhat). Batch statistics in train mode, running statistics in eval."""
    t = weights.tensors
    scale, shift = t[f"{name}.bn.scale"], t[f"{name}.bn.shift"]
    if mode == "train":
        mu64, var64 = _kernels.bn_stats(x)
        mean = mu64.astype(x.dtype)
        inv = (1.0 / np.sqrt(var64 + BN_EPS)).astype(x.dtype)
        if update_running:
            rm, rv = t[f"{name}.bn.mean"], t[f"{name}.bn.var"]
            t[f"{name}.bn.mean"] = ((1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * mu64).astype(rm.dtype)
            t[f"{name}.bn.var"] = ((1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * var64).astype(rv.dtype)
    else:
        mean = t[f"{name}.bn.mean"].astype(x.dtype)
        inv = (1.0 / np.sqrt(t[f"{name}.bn.var"].astype(np.float64) + BN_EPS)).astype(x.dtype)
    y, mask = _kernels.bn_relu_apply(x, mean, inv, scale, shift)
    return y, (x, mask, inv, scale, mode == "train")


def _bn_relu_bwd(step_cache, gy, grads, name):
    xhat, mask, inv, scale, train = step_cache
    gy = np.ascontiguousarray(gy)
    gscale, gshift = _kernels.bn_relu_bwd(gy, xhat, mask, inv, scale, train)
    _accumulate(grads, f"{name}.bn.scale", gscale.astype(scale.dtype))
    _accumulate(grads, f"{name}.bn.shift", gshift.astype(scale.dtype))
    return gy


def _dropout_fwd(x, p, rng):
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * mask, mask


def _maxpool_fwd(x):
    """Max over the second-to-last axis of (..., n, C) with argmax cache."""
    lead = x.shape[:-2]
    n, c = x.shape[-2], x.shape[-1]
    flat = np.ascontiguousarray(x.reshape(-1, n, c))
    y, arg = _kernels.group_max_fwd(flat)
    return y.reshape(lead + (c,)), (arg, lead, n, c)


def _maxpool_bwd(cache, gy):
    arg, lead, n, c = cache
    flat = np.ascontiguousarray(gy.reshape(-1, c))
    gx = _kernels.group_max_bwd(flat, arg, n)
    return gx.reshape(lead + (n, c))


def _mlp_block_fwd(weights, prefix, n_layers, x, mode, cache, update_running=False):
    """Chain of linear+bn+relu layers on a 2D matrix."""
    steps = []
    for i in range(n_layers):
        name = f"{prefix}.mlp{i}"
        y, lin_cache = _linear_fwd(x, weights.tensors[f"{name}.w"], weights.tensors[f"{name}.b"])
        y, bn_cache = _bn_relu_fwd(weights, name, y, mode, update_running)
        steps.append((name, lin_cache, bn_cache))
        x = y
    cache.append((prefix, steps))
    return x


def _mlp_block_bwd(steps, gy, grads):
    for name, lin_cache, bn_cache in reversed(steps):
        gy = _bn_relu_bwd(bn_cache, gy, grads, name)
        gy, gw, gb = _linear_bwd(lin_cache, gy)
        _accumulate(grads, f"{name}.w", gw)
        _accumulate(grads, f"{name}.b", gb)
    return gy


def _accumulate(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


# ---------------------------------------------------------------------------
# forward / backward


def _check_input(weights, d):
    if d.ndim != 2 or d.shape[1] != len(weights.channels):
        raise ValueError(
            f"input has shape {d.shape}; weights expect {len(weights.channels)} channels {weights.channels}"
        )


def canonical_order(d: np.ndarray) -> np.ndarray:
    """Lexicographic row order over all channels (primary = column 0)."""
    return np.lexsort(tuple(d[:, c] for c in range(d.shape[1] - 1, -1, -1)))


def _coord_columns(channels) -> tuple:
    try:
        return tuple(channels.index(c) for c in COORD_LABELS)
    except ValueError as e:
        raise ValueError(f"channels must include {COORD_LABELS}") from e


def forward_batch(weights: NetworkWeights, sets: list, mode: str = "eval", rng=None, plan: GroupPlan | None = None,
                  update_running: bool = False):
    """Score a batch of point-difference sets; returns (scores (B,), cache).

    In eval mode each set is canonicalized first, making the score exactly
    invariant to input row order. A precomputed GroupPlan is honored only in
    train mode (eval reorders rows, which would invalidate it).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"bad mode {mode!r}")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(0)
    if rng is not None and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)

    dtype = next(iter(weights.tensors.values())).dtype
    prepared = []
    for d in sets:
        arr = np.ascontiguousarray(np.asarray(d), dtype=dtype)
        _check_input(weights, arr)
        if len(arr) == 0:
            raise ValueError("cannot score an empty point set")
        if mode == "eval":
            arr = arr[canonical_order(arr)]
        prepared.append(arr)

    if weights.arch == "pointnetpp":
        return _forward_pointnetpp(weights, prepared, mode, rng, plan, update_running)
    if weights.arch == "pointnet":
        return _forward_pointnet(weights, prepared, mode, rng, update_running)
    raise ValueError(f"unknown architecture {weights.arch!r}")


def forward(weights: NetworkWeights, d, mode: str = "eval", rng=None):
    """Single-set convenience wrapper; returns (score, cache)."""
    data = d.data if hasattr(d, "data") and not isinstance(d, np.ndarray) else d
    scores, cache = forward_batch(weights, [np.asarray(data)], mode=mode, rng=rng)
    return float(scores[0]), cache


def pointnet_forward(weights: NetworkWeights, d, mode: str = "eval", rng=None):
    if weights.arch != "pointnet":
        raise ValueError("pointnet_forward requires pointnet weights")
    return forward(weights, d, mode=mode, rng=rng)


def _gather_groups(feats_per_set, groups):
    """Stack grouped features: feats_per_set[b][groups[b, k, j]] -> (B, K, n, C)."""
    b, k, n = groups.shape
    c = feats_per_set[0].shape[1]
    out = np.empty((b, k, n, c), dtype=feats_per_set[0].dtype)
    for i in range(b):
        out[i] = feats_per_set[i][groups[i]]
    return out


def _forward_pointnetpp(weights, sets, mode, rng, plan, update_running):
    arch_plan = _arch_plan("pointnetpp", len(weights.channels))
    uc, vc = _coord_columns(weights.channels)
    dtype = sets[0].dtype
    b = len(sets)

    coords = [np.ascontiguousarray(s[:, [uc, vc]], dtype=np.float64) for s in sets]
    if plan is None:
        plan = build_group_plan(coords, arch_plan)
    elif mode == "eval":
        raise ValueError("precomputed group plans are only valid in train mode")

    cache = {"arch": "pointnetpp", "plan": plan, "blocks": [], "b": b, "dtype": dtype}

    # SA1: group raw channels + relative coords, shared MLP, max-pool
    sa1 = arch_plan["sa"][0]
    cent1 = np.stack([coords[i][plan.sa1_centroids[i]] for i in range(b)]).astype(dtype)
    grouped = _gather_groups(sets, plan.sa1_groups)
    gcoords = np.stack([coords[i][plan.sa1_groups[i].reshape(-1)].reshape(plan.sa1_groups[i].shape + (2,))
                        for i in range(b)]).astype(dtype)
    rel1 = gcoords - cent1[:, :, None, :]
    x = np.concatenate([grouped, rel1], axis=-1)
    k1, n1, c1 = x.shape[1], x.shape[2], x.shape[3]
    x = x.reshape(-1, c1)
    x = _mlp_block_fwd(weights, "sa1", len(sa1["widths"]), x, mode, cache["blocks"], update_running)
    x = x.reshape(b, k1, n1, -1)
    feats1, pool1 = _maxpool_fwd(x)  # (B, 128, 32ch)
    cache["pool1"] = pool1

    # SA2: group SA1 outputs (differentiable path through the gather)
    sa2 = arch_plan["sa"][1]
    coords1 = [coords[i][plan.sa1_centroids[i]] for i in range(b)]
    cent2 = np.stack([coords1[i][plan.sa2_centroids[i]] for i in range(b)]).astype(dtype)
    bidx = np.arange(b)[:, None, None]
    grouped2 = feats1[bidx, plan.sa2_groups]  # (B, 16, 32, C)
    gcoords2 = np.stack([coords1[i][plan.sa2_groups[i].reshape(-1)].reshape(plan.sa2_groups[i].shape + (2,))
                         for i in range(b)]).astype(dtype)
    rel2 = gcoords2 - cent2[:, :, None, :]
    x = np.concatenate([grouped2, rel2], axis=-1)
    k2, n2, c2 = x.shape[1], x.shape[2], x.shape[3]
    x = x.reshape(-1, c2)
    x = _mlp_block_fwd(weights, "sa2", len(sa2["widths"]), x, mode, cache["blocks"], update_running)
    x = x.reshape(b, k2, n2, -1)
    feats2, pool2 = _maxpool_fwd(x)  # (B, 16, 64)
    cache["pool2"] = pool2
    cache["sa2_shape"] = (b, k2, n2, c2)
    cache["feats1_shape"] = feats1.shape

    # global SA: concat absolute coords, shared MLP, pool the whole set
    g = arch_plan["global"]
    x = np.concatenate([feats2, cent2], axis=-1)  # (B, 16, 66)
    kg, cg = x.shape[1], x.shape[2]
    x = x.reshape(-1, cg)
    x = _mlp_block_fwd(weights, "sag", len(g["widths"]), x, mode, cache["blocks"], update_running)
    x = x.reshape(b, kg, -1)
    vec, poolg = _maxpool_fwd(x)  # (B, 128)
    cache["poolg"] = poolg
    cache["g_shape"] = (b, kg, cg)

    scores = _head_fwd(weights, arch_plan["fc"], vec, mode, rng, cache, update_running)
    return scores, cache


def _head_fwd(weights, fc_plan, x, mode, rng, cache, update_running):
    steps = []
    for layer in fc_plan:
        name = layer["name"]
        y, lin_cache = _linear_fwd(x, weights.tensors[f"{name}.w"], weights.tensors[f"{name}.b"])
        bn_cache = drop_mask = None
        if layer["bn"]:
            y, bn_cache = _bn_relu_fwd(weights, name, y, mode, update_running)
            if layer["dropout"] is not None and mode == "train":
                y, drop_mask = _dropout_fwd(y, layer["dropout"], rng)
        steps.append((name, lin_cache, bn_cache, drop_mask))
        x = y
    cache["head"] = steps
    return x[:, 0]


def _head_bwd(cache, gy, grads):
    gy = gy[:, None]
    for name, lin_cache, bn_cache, drop_mask in reversed(cache["head"]):
        if drop_mask is not None:
            gy = gy * drop_mask
        if bn_cache is not None:
            gy = _bn_relu_bwd(bn_cache, gy, grads, name)
        gy, gw, gb = _linear_bwd(lin_cache, gy)
        _accumulate(grads, f"{name}.w", gw)
        _accumulate(grads, f"{name}.b", gb)
    return gy


def _forward_pointnet(weights, sets, mode, rng, update_running):
    arch_plan = _arch_plan("pointnet", len(weights.channels))
    b = len(sets)
    lens = np.array([len(s) for s in sets])
    starts = np.concatenate([[0], np.cumsum(lens)])
    x = np.concatenate(sets, axis=0)

    cache = {"arch": "pointnet", "blocks": [], "b": b, "starts": starts, "dtype": x.dtype}
    for i, layer in enumerate(arch_plan["pre"]):
        # reuse the mlp block machinery one layer at a time to keep names flat
        x = _mlp_block_fwd_single(weights, layer["name"], x, mode, cache["blocks"], update_running)

    pooled = np.empty((b, x.shape[1]), dtype=x.dtype)
    argrows = np.empty((b, x.shape[1]), dtype=np.int64)
    for i in range(b):
        seg = x[starts[i] : starts[i + 1]]
        arg = np.argmax(seg, axis=0)
        argrows[i] = arg + starts[i]
        pooled[i] = seg[arg, np.arange(x.shape[1])]
    cache["segpool"] = (argrows, x.shape)

    scores = _head_fwd(weights, arch_plan["fc"], pooled, mode, rng, cache, update_running)
    return scores, cache


def _mlp_block_fwd_single(weights, name, x, mode, blocks, update_running):
    y, lin_cache = _linear_fwd(x, weights.tensors[f"{name}.w"], weights.tensors[f"{name}.b"])
    y, bn_cache = _bn_relu_fwd(weights, name, y, mode, update_running)
    blocks.append((name, [(name, lin_cache, bn_cache)]))
    return y


def backward_batch(cache, upstream) -> dict:
    """Parameter gradients given d(loss)/d(score) per batch element.

    Gradients are computed in the dtype of the forward pass (single
    precision in training, double precision for gradient checks).
    """
    grads = {}
    gy = np.asarray(upstream, dtype=cache["dtype"])
    if cache["arch"] == "pointnetpp":
        gvec = _head_bwd(cache, gy, grads)  # (B, 128)
        b, kg, cg = cache["g_shape"]
        gx = _maxpool_bwd(cache["poolg"], gvec).reshape(-1, gvec.shape[1])
        blocks = {name: steps for name, steps in cache["blocks"]}
        gx = _mlp_block_bwd(blocks["sag"], gx, grads)
        gx = gx.reshape(b, kg, cg)
        gfeats2 = np.ascontiguousarray(gx[..., : cg - 2])  # coords carry no parameters

        bq, k2, n2, c2 = cache["sa2_shape"]
        gx = _maxpool_bwd(cache["pool2"], gfeats2).reshape(-1, gfeats2.shape[-1])
        gx = _mlp_block_bwd(blocks["sa2"], gx, grads)
        gx = gx.reshape(b, k2, n2, c2)
        ggrouped2 = gx[..., : c2 - 2]

        plan = cache["plan"]
        gfeats1 = np.zeros(cache["feats1_shape"], dtype=cache["dtype"])
        bidx = np.arange(b)[:, None, None]
        np.add.at(gfeats1, (bidx, plan.sa2_groups), ggrouped2)

        gx = _maxpool_bwd(cache["pool1"], gfeats1).reshape(-1, gfeats1.shape[-1])
        _mlp_block_bwd(blocks["sa1"], gx, grads)
        return grads

    if cache["arch"] == "pointnet":
        gpooled = _head_bwd(cache, gy, grads)  # (B, 16)
        argrows, shape = cache["segpool"]
        gx = np.zeros(shape, dtype=cache["dtype"])
        cols = np.arange(shape[1])
        for i in range(cache["b"]):
            np.add.at(gx, (argrows[i], cols), gpooled[i])
        for name, steps in reversed(cache["blocks"]):
            gx = _mlp_block_bwd(steps, gx, grads)
        return grads

    raise ValueError("unknown cache architecture")


def backward(cache, upstream: float) -> dict:
    return backward_batch(cache, np.array([upstream], dtype=np.float64))


# ---------------------------------------------------------------------------
# serialization (also used as the feature-cache container)


def write_container(tag: str, tensors: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    tag_b = tag.encode("utf-8")
    buf.write(struct.pack("<H", len(tag_b)))
    buf.write(tag_b)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        arr = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def read_container(data: bytes):
    view = memoryview(data)
    if bytes(view[:4]) != MAGIC:
        raise ValueError("bad magic: not a weights container")
    (version,) = struct.unpack_from("<H", view, 4)
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    (tag_len,) = struct.unpack_from("<H", view, 6)
    pos = 8
    tag = bytes(view[pos : pos + tag_len]).decode("utf-8")
    pos += tag_len
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    tensors = {}
    name = "<header>"
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + name_len]).decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = []
            for _ in range(ndim):
                (d,) = struct.unpack_from("<I", view, pos)
                pos += 4
                shape.append(d)
            n_items = int(np.prod(shape)) if shape else 1
            nbytes = 4 * n_items
            if pos + nbytes > len(data):
                raise struct.error("tensor data out of range")
            arr = np.frombuffer(view, "<f4", n_items, pos).reshape(shape).copy()
            pos += nbytes
            tensors[name] = arr
    except struct.error as e:
        raise ValueError(f"truncated container while reading tensor {name!r}") from e
    return tag, tensors


def save_weights(w: NetworkWeights) -> bytes:
    tensors = dict(w.tensors)
    codes = np.array([ord(c) for c in ",".join(w.channels)], dtype=np.float32)
    tensors[_META_CHANNELS] = codes
    return write_container(w.arch, tensors)


def load_weights(data: bytes, expect_arch: str | None = None) -> NetworkWeights:
    tag, tensors = read_container(data)
    if expect_arch is not None and tag != expect_arch:
        raise ValueError(f"architecture tag mismatch: file is {tag!r}, expected {expect_arch!r}")
    meta = tensors.pop(_META_CHANNELS, None)
    if meta is None:
        raise ValueError("container missing channel labels")
    channels = tuple("".join(chr(int(c)) for c in meta).split(","))
    w = NetworkWeights(arch=tag, tensors=tensors, channels=channels)
    validate_shapes(w)
    return w
