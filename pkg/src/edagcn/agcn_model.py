"""Adaptive graph convolutional network over several graphs.

Activations are ``(N, I, P)`` tensors: node, graph slice, feature. One layer
is

    diffuse  h[n, i]    = sum_k C[k, i] * (A_i^k z[:, i])[n]
    mix      g[n, i]    = sum_j R[i, j (, n)] * h[n, j]
    project  out[n,i,p] = g[n, i] . W[:, (n,) i, p]

optionally plus the same block applied to the raw input ``X`` with its own
parameters, followed by ReLU. A final affine map and softmax turn the last
tensor into class probabilities.

Every ``*_forward`` has a ``*_backward`` counterpart used by the trainer.
Reductions run in a fixed order (numpy einsum / matmul over fixed axes), so
results are bitwise reproducible for a fixed BLAS thread count.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import ShapeError, ValidationError
from .graph_core import AdjacencyPowerSet, FeatureMatrix

CHECKPOINT_FORMAT = "edagcn-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int
    in_features: int
    n_classes: int
    i_count: int = 1
    widths: tuple | None = None
    k_hop: int = 1
    r_mode: Literal["shared", "per_node"] = "shared"
    w_mode: Literal["shared", "per_node"] = "shared"
    residual: bool = True
    head: Literal["flatten", "average"] = "flatten"
    dtype: Literal["float64", "float32"] = "float64"

    def __post_init__(self):
        widths = (64, 8, self.n_classes) if self.widths is None else tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if not widths:
            raise ValidationError("at least one layer is required")
        if min(widths) < 1:
            raise ValidationError(f"layer widths must be >= 1, got {widths}")
        if self.k_hop < 1:
            raise ValidationError("k_hop must be >= 1")
        for name in ("n_nodes", "in_features", "n_classes", "i_count"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.r_mode not in ("shared", "per_node") or self.w_mode not in ("shared", "per_node"):
            raise ValidationError("r_mode and w_mode must be 'shared' or 'per_node'")
        if self.head not in ("flatten", "average"):
            raise ValidationError(f"unknown head {self.head!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValidationError(f"unknown dtype {self.dtype!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths)

    def in_width(self, layer: int) -> int:
        """Input width of 0-based ``layer``."""
        return self.in_features if layer == 0 else self.widths[layer - 1]

    @property
    def head_width(self) -> int:
        last = self.widths[-1]
        return self.i_count * last if self.head == "flatten" else last

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class LayerParams:
    hop_coeffs: np.ndarray  # (K_hop, I)
    graph_mix: np.ndarray  # (I, I) or (I, I, N)
    feature_mix: np.ndarray  # (P_in, I, P_out) or (P_in, N, I, P_out)


@dataclass
class ParameterSet:
    z_params: list
    x_params: list | None
    out_weights: np.ndarray
    out_bias: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every trainable tensor, in a fixed order."""
        out = {}
        for branch, layers in (("z", self.z_params), ("x", self.x_params or [])):
            for l, p in enumerate(layers):
                out[f"{branch}{l}.hop_coeffs"] = p.hop_coeffs
                out[f"{branch}{l}.graph_mix"] = p.graph_mix
                out[f"{branch}{l}.feature_mix"] = p.feature_mix
        out["out.weights"] = self.out_weights
        out["out.bias"] = self.out_bias
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], n_layers: int, residual: bool) -> "ParameterSet":
        def layers(branch):
            return [
                LayerParams(
                    tensors[f"{branch}{l}.hop_coeffs"],
                    tensors[f"{branch}{l}.graph_mix"],
                    tensors[f"{branch}{l}.feature_mix"],
                )
                for l in range(n_layers)
            ]

        return cls(layers("z"), layers("x") if residual else None, tensors["out.weights"], tensors["out.bias"])

    @property
    def n_layers(self) -> int:
        return len(self.z_params)

    def map(self, fn) -> "ParameterSet":
        return ParameterSet.from_tensors(
            {k: fn(v) for k, v in self.tensors().items()}, self.n_layers, self.x_params is not None
        )

    def copy(self) -> "ParameterSet":
        return self.map(np.array)

    def zeros_like(self) -> "ParameterSet":
        return self.map(np.zeros_like)

    def size(self) -> int:
        return sum(v.size for v in self.tensors().values())

    def allclose(self, other: "ParameterSet", **kw) -> bool:
        a, b = self.tensors(), other.tensors()
        return a.keys() == b.keys() and all(np.allclose(a[k], b[k], **kw) for k in a)

    def equal(self, other: "ParameterSet") -> bool:
        a, b = self.tensors(), other.tensors()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# -- shapes and initialisation ----------------------------------------------

def layer_shapes(cfg: ModelConfig, layer: int, branch: str) -> dict[str, tuple]:
    p_in = cfg.in_features if branch == "x" else cfg.in_width(layer)
    p_out = cfg.widths[layer]
    i, n = cfg.i_count, cfg.n_nodes
    return {
        "hop_coeffs": (cfg.k_hop, i),
        "graph_mix": (i, i) if cfg.r_mode == "shared" else (i, i, n),
        "feature_mix": (p_in, i, p_out) if cfg.w_mode == "shared" else (p_in, n, i, p_out),
    }


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    out = {}
    for branch in ("z", "x") if cfg.residual else ("z",):
        for l in range(cfg.n_layers):
            for name, shape in layer_shapes(cfg, l, branch).items():
                out[f"{branch}{l}.{name}"] = shape
    out["out.weights"] = (cfg.head_width, cfg.n_classes)
    out["out.bias"] = (cfg.n_classes,)
    return out


def check_params(params: ParameterSet, cfg: ModelConfig) -> None:
    want = expected_shapes(cfg)
    have = {k: v.shape for k, v in params.tensors().items()}
    if want.keys() != have.keys():
        raise ShapeError(f"parameter names {sorted(have)} do not match config {sorted(want)}")
    for k, shape in want.items():
        if have[k] != shape:
            raise ShapeError(f"{k}: expected shape {shape}, got {have[k]}")


def _glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParameterSet:
    """Hop weights ``1/K``, near-identity graph mixing, Glorot feature maps, zero bias."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)

    def make_layer(l, branch):
        shapes = layer_shapes(cfg, l, branch)
        hop = np.full(shapes["hop_coeffs"], 1.0 / cfg.k_hop)
        eye = np.eye(cfg.i_count)
        if cfg.r_mode == "per_node":
            eye = np.repeat(eye[:, :, None], cfg.n_nodes, axis=2)
        mix = eye + rng.uniform(-0.01, 0.01, size=shapes["graph_mix"])
        w_shape = shapes["feature_mix"]
        w = _glorot(rng, w_shape, w_shape[0], w_shape[-1])
        return LayerParams(hop.astype(dtype), mix.astype(dtype), w.astype(dtype))

    z_params, x_params = [], []
    for l in range(cfg.n_layers):
        z_params.append(make_layer(l, "z"))
        if cfg.residual:
            x_params.append(make_layer(l, "x"))
    out_w = _glorot(rng, (cfg.head_width, cfg.n_classes), cfg.head_width, cfg.n_classes).astype(dtype)
    return ParameterSet(z_params, x_params if cfg.residual else None, out_w, np.zeros(cfg.n_classes, dtype=dtype))


# -- building blocks ---------------------------------------------------------

def replicate(x, i_count: int) -> np.ndarray:
    """``(N, F)`` features -> ``(N, I, F)`` with the same row on every slice."""
    v = x.values if isinstance(x, FeatureMatrix) else np.asarray(x)
    return np.broadcast_to(v[:, None, :], (v.shape[0], i_count, v.shape[1]))


def diffuse(z: np.ndarray, powers: AdjacencyPowerSet) -> np.ndarray:
    """Stack of ``A_i^k z[:, i]`` with shape ``(K, N, I, P)``."""
    n, i_count, p = z.shape
    if powers.n_graphs != i_count or powers.n_nodes != n:
        raise ShapeError(f"tensor {z.shape} does not match {powers.n_graphs} graphs on {powers.n_nodes} nodes")
    dtype = np.float32 if z.dtype == np.float32 else np.float64
    out = np.empty((powers.k_hop, n, i_count, p), dtype=dtype)
    for i in range(i_count):
        zi = np.ascontiguousarray(z[:, i, :])
        for k in range(powers.k_hop):
            out[k, :, i, :] = powers.matrices[i][k] @ zi
    return out


def nam_forward(z_in: np.ndarray, powers: AdjacencyPowerSet, hop_coeffs: np.ndarray, diffused: np.ndarray | None = None) -> np.ndarray:
    """K-hop neighbourhood aggregation per graph slice.

    ``diffused`` may carry a precomputed :func:`diffuse` result for ``z_in``.
    """
    if hop_coeffs.shape != (powers.k_hop, z_in.shape[1]):
        raise ShapeError(f"hop_coeffs shape {hop_coeffs.shape} != {(powers.k_hop, z_in.shape[1])}")
    d = diffuse(z_in, powers) if diffused is None else diffused
    return np.einsum("ki,knip->nip", hop_coeffs, d)


def nam_backward(dh, diffused, powers: AdjacencyPowerSet, hop_coeffs, need_input_grad=True):
    d_hop = np.einsum("nip,knip->ki", dh, diffused)
    if not need_input_grad:
        return d_hop, None
    dz = np.zeros(dh.shape, dtype=dh.dtype)
    for i in range(dh.shape[1]):
        dhi = np.ascontiguousarray(dh[:, i, :])
        for k in range(powers.k_hop):
            dz[:, i, :] += hop_coeffs[k, i] * (powers.matrices[i][k].T @ dhi)
    return d_hop, dz


def gam_forward(h: np.ndarray, graph_mix: np.ndarray) -> np.ndarray:
    """Mix graph slices: ``g[n, i] = sum_j R[i, j (, n)] h[n, j]``."""
    n, i_count, _ = h.shape
    if graph_mix.shape == (i_count, i_count):
        return np.einsum("ij,njp->nip", graph_mix, h)
    if graph_mix.shape == (i_count, i_count, n):
        return np.einsum("ijn,njp->nip", graph_mix, h)
    raise ShapeError(f"graph_mix shape {graph_mix.shape} incompatible with tensor {h.shape}")


def gam_backward(dg, h, graph_mix):
    if graph_mix.ndim == 2:
        return np.einsum("nip,njp->ij", dg, h), np.einsum("ij,nip->njp", graph_mix, dg)
    return np.einsum("nip,njp->ijn", dg, h), np.einsum("ijn,nip->njp", graph_mix, dg)


def fam_forward(g: np.ndarray, feature_mix: np.ndarray) -> np.ndarray:
    """Per-slice linear feature map, shared across nodes or per node."""
    n, i_count, p_in = g.shape
    if feature_mix.ndim == 3 and feature_mix.shape[:2] == (p_in, i_count):
        # (I, N, P_in) @ (I, P_in, P_out)
        return np.matmul(g.transpose(1, 0, 2), feature_mix.transpose(1, 0, 2)).transpose(1, 0, 2)
    if feature_mix.ndim == 4 and feature_mix.shape[:3] == (p_in, n, i_count):
        return np.einsum("niq,qnip->nip", g, feature_mix)
    raise ShapeError(f"feature_mix shape {feature_mix.shape} incompatible with tensor {g.shape}")


def fam_backward(dz, g, feature_mix, need_input_grad=True):
    if feature_mix.ndim == 3:
        gt = g.transpose(1, 2, 0)  # (I, P_in, N)
        dzt = dz.transpose(1, 0, 2)  # (I, N, P_out)
        dw = np.matmul(gt, dzt).transpose(1, 0, 2)
        dg = np.matmul(dzt, feature_mix.transpose(1, 2, 0)).transpose(1, 0, 2) if need_input_grad else None
    else:
        dw = np.einsum("niq,nip->qnip", g, dz)
        dg = np.einsum("qnip,nip->niq", feature_mix, dz) if need_input_grad else None
    return dw, dg


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def head_features(z_last: np.ndarray, head: str = "flatten") -> np.ndarray:
    if head == "flatten":
        return z_last.reshape(z_last.shape[0], -1)
    return z_last.mean(axis=1)


def output_forward(z_last: np.ndarray, out_weights: np.ndarray, bias: np.ndarray, head: str = "flatten"):
    """Affine map of the per-node features followed by a row softmax.

    Returns ``(y_hat, logits)``.
    """
    feats = head_features(z_last, head)
    if out_weights.shape[0] != feats.shape[1] or bias.shape != (out_weights.shape[1],):
        raise ShapeError(f"output weights {out_weights.shape} / bias {bias.shape} do not fit features {feats.shape}")
    logits = feats @ out_weights + bias
    return softmax(logits), logits


# -- full model --------------------------------------------------------------

@dataclass
class BranchCache:
    z_in: np.ndarray
    diffused: np.ndarray
    h: np.ndarray
    g: np.ndarray


@dataclass
class LayerCache:
    z: BranchCache
    x: BranchCache | None
    pre_nonlin: np.ndarray
    post_nonlin: np.ndarray


@dataclass
class Activations:
    layers: list = field(default_factory=list)
    logits: np.ndarray | None = None
    output: np.ndarray | None = None


def _branch(z_in, powers, p: LayerParams, diffused=None):
    d = diffuse(z_in, powers) if diffused is None else diffused
    h = nam_forward(z_in, powers, p.hop_coeffs, d)
    g = gam_forward(h, p.graph_mix)
    return fam_forward(g, p.feature_mix), BranchCache(z_in, d, h, g)


def layer_forward(z_prev, x_input, layer: int, params: ParameterSet, powers: AdjacencyPowerSet, cfg: ModelConfig, x_diffused=None):
    """One residual layer; ``layer`` is 0-based.

    Returns ``(post_nonlin, cache)``. ``x_diffused`` may hold the diffused
    replicated input, which does not depend on the parameters.
    """
    if not 0 <= layer < cfg.n_layers:
        raise ShapeError(f"layer {layer} outside [0, {cfg.n_layers})")
    pre, zc = _branch(z_prev, powers, params.z_params[layer], x_diffused if layer == 0 else None)
    xc = None
    if cfg.residual:
        xr = replicate(x_input, cfg.i_count)
        out_x, xc = _branch(xr, powers, params.x_params[layer], x_diffused)
        pre = pre + out_x
    post = relu(pre)
    return post, LayerCache(zc, xc, pre, post)


def _features(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)


def model_forward(x, powers: AdjacencyPowerSet, params: ParameterSet, cfg: ModelConfig) -> Activations:
    """Run every layer and the output head, keeping what backprop needs."""
    xv = _features(x).astype(cfg.dtype, copy=False)
    if xv.shape != (cfg.n_nodes, cfg.in_features):
        raise ShapeError(f"features shape {xv.shape} != {(cfg.n_nodes, cfg.in_features)}")
    if powers.n_graphs != cfg.i_count:
        raise ShapeError(f"{powers.n_graphs} graphs supplied, model expects {cfg.i_count}")
    if powers.k_hop != cfg.k_hop:
        raise ShapeError(f"powers up to hop {powers.k_hop}, model expects {cfg.k_hop}")
    xr = replicate(xv, cfg.i_count)
    x_diff = diffuse(xr, powers)
    acts = Activations()
    z = xr
    for l in range(cfg.n_layers):
        z, cache = layer_forward(z, xv, l, params, powers, cfg, x_diff)
        acts.layers.append(cache)
    acts.output, acts.logits = output_forward(z, params.out_weights, params.out_bias, cfg.head)
    return acts


def predict(x, powers: AdjacencyPowerSet, params: ParameterSet, cfg: ModelConfig) -> np.ndarray:
    return model_forward(x, powers, params, cfg).output


def _branch_backward(d_out, cache: BranchCache, p: LayerParams, powers, need_input_grad):
    d_w, dg = fam_backward(d_out, cache.g, p.feature_mix)
    d_r, dh = gam_backward(dg, cache.h, p.graph_mix)
    d_c, dz = nam_backward(dh, cache.diffused, powers, p.hop_coeffs, need_input_grad)
    return LayerParams(d_c, d_r, d_w), dz


def model_backward(d_logits: np.ndarray, acts: Activations, params: ParameterSet, powers: AdjacencyPowerSet, cfg: ModelConfig) -> ParameterSet:
    """Gradient of a scalar with respect to all parameters, given its gradient in the logits."""
    z_last = acts.layers[-1].post_nonlin
    feats = head_features(z_last, cfg.head)
    d_out_w = feats.T @ d_logits
    d_out_b = d_logits.sum(axis=0)
    d_feats = d_logits @ params.out_weights.T
    if cfg.head == "flatten":
        dz = d_feats.reshape(z_last.shape)
    else:
        dz = np.repeat(d_feats[:, None, :] / cfg.i_count, cfg.i_count, axis=1)
    z_grads: list = [None] * cfg.n_layers
    x_grads: list = [None] * cfg.n_layers
    for l in range(cfg.n_layers - 1, -1, -1):
        cache = acts.layers[l]
        d_pre = dz * (cache.pre_nonlin > 0)
        z_grads[l], dz = _branch_backward(d_pre, cache.z, params.z_params[l], powers, need_input_grad=l > 0)
        if cfg.residual:
            x_grads[l], _ = _branch_backward(d_pre, cache.x, params.x_params[l], powers, need_input_grad=False)
    return ParameterSet(z_grads, x_grads if cfg.residual else None, d_out_w, d_out_b)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(params: ParameterSet, cfg: ModelConfig, path, extra: dict | None = None) -> None:
    """JSON checkpoint with a shape manifest and the model config hash."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "tensors": {
            k: {"shape": list(v.shape), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in params.tensors().items()
        },
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[ParameterSet, ModelConfig]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path}: not an edagcn checkpoint")
    stored = doc["config"]
    stored["widths"] = tuple(stored["widths"])
    stored_cfg = ModelConfig(**stored)
    if stored_cfg.config_hash() != doc["config_hash"]:
        raise ValidationError(f"{path}: config hash mismatch")
    if cfg is not None and cfg.config_hash() != stored_cfg.config_hash():
        raise ShapeError(f"{path}: checkpoint was written for a different model config")
    want = expected_shapes(stored_cfg)
    tensors = {}
    for k, shape in want.items():
        if k not in doc["tensors"]:
            raise ShapeError(f"{path}: missing tensor {k}")
        t = doc["tensors"][k]
        if tuple(t["shape"]) != shape or len(t["data"]) != int(np.prod(shape)):
            raise ShapeError(f"{path}: tensor {k} has shape {t['shape']}, expected {list(shape)}")
        tensors[k] = np.asarray(t["data"], dtype=stored_cfg.dtype).reshape(shape)
    if set(doc["tensors"]) != set(want):
        raise ShapeError(f"{path}: unexpected tensors {sorted(set(doc['tensors']) - set(want))}")
    return ParameterSet.from_tensors(tensors, stored_cfg.n_layers, stored_cfg.residual), stored_cfg
