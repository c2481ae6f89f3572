"""Regularised objective, exact gradients, Adam and the training loop.

The objective is

    -sum_{n in mask} log y_hat[n, y_n]
    + mu1 * sum_i trace(Y_hat^T A_i Y_hat)
    + mu2 * ||weights||_2^2
    + lambda * sum_l ||R_l||_1

where the squared l2 term covers hop coefficients, feature maps and output
weights (graph-mixing tensors and the bias are excluded) and the l1 term
covers every graph-mixing tensor of both branches.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
import scipy.sparse as sp

from .agcn_model import ModelConfig, ParameterSet, check_params, init_params, model_backward, model_forward
from .errors import NumericError, ValidationError
from .graph_core import AdjacencyPowerSet, FeatureMatrix, LabelData, adjacency_powers

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    mu1: float = 1e-6
    mu2: float = 1e-6
    sparsity: float = 1e-6
    learning_rate: float = 0.005
    max_epochs: int = 300
    patience: int = 60
    seed: int = 0
    es_metric: Literal["val_accuracy", "val_loss"] = "val_accuracy"
    smoothness: Literal["adjacency", "laplacian"] = "adjacency"

    def __post_init__(self):
        for name in ("mu1", "mu2", "sparsity"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValidationError("patience must lie in [0, max_epochs]")
        if self.es_metric not in ("val_accuracy", "val_loss"):
            raise ValidationError(f"unknown es_metric {self.es_metric!r}")
        if self.smoothness not in ("adjacency", "laplacian"):
            raise ValidationError(f"unknown smoothness variant {self.smoothness!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    cross_entropy: float
    smoothness: float
    weight_decay: float
    sparsity: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Problem:
    """Everything a loss evaluation needs apart from the parameters."""

    x: np.ndarray
    powers: AdjacencyPowerSet
    labels: LabelData

    @classmethod
    def build(cls, x, graphs: Sequence, labels: LabelData, k_hop: int, normalize: bool = False) -> "Problem":
        graphs = getattr(graphs, "graphs", graphs)
        xv = x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)
        return cls(xv, adjacency_powers(graphs, k_hop, normalize), labels)


# -- loss terms --------------------------------------------------------------

def _mask(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=np.int64).ravel()
    if m.size == 0:
        raise ValidationError("mask is empty; the objective is undefined")
    return m


def cross_entropy(y_hat: np.ndarray, labels: LabelData, mask) -> float:
    """Summed negative log-likelihood of the true class over ``mask``."""
    m = _mask(mask)
    y = labels.labels[m]
    if (y < 0).any():
        raise ValidationError("mask contains unlabeled nodes")
    return float(-np.log(np.maximum(y_hat[m, y], PROB_FLOOR)).sum())


def _adjacency_list(graphs) -> list:
    if isinstance(graphs, AdjacencyPowerSet):
        return list(graphs.adjacency)
    graphs = getattr(graphs, "graphs", graphs)
    return [sp.csr_matrix(g.adjacency() if hasattr(g, "adjacency") else g, dtype=np.float64) for g in graphs]


def _smoothness_operator(a: sp.csr_matrix, variant: str) -> sp.csr_matrix:
    if variant == "adjacency":
        return a
    deg = np.asarray(a.sum(axis=1)).ravel()
    return sp.csr_matrix(sp.diags(deg) - a)


def smoothness_reg(y_hat: np.ndarray, graphs, variant: str = "adjacency") -> float:
    """``sum_i trace(Y^T A_i Y)``; ``variant='laplacian'`` uses ``D_i - A_i``."""
    total = 0.0
    for a in _adjacency_list(graphs):
        total += float(np.sum(y_hat * (_smoothness_operator(a, variant) @ y_hat)))
    return total


def _smoothness_grad(y_hat: np.ndarray, adjacency: Sequence, variant: str) -> np.ndarray:
    g = np.zeros_like(y_hat)
    for a in adjacency:
        op = _smoothness_operator(a, variant)
        g += op @ y_hat + op.T @ y_hat
    return g


def _decayed(params: ParameterSet) -> list[np.ndarray]:
    out = []
    for layers in (params.z_params, params.x_params or []):
        for p in layers:
            out.extend([p.hop_coeffs, p.feature_mix])
    out.append(params.out_weights)
    return out


def _mixing(params: ParameterSet) -> list[np.ndarray]:
    return [p.graph_mix for layers in (params.z_params, params.x_params or []) for p in layers]


def weight_decay_reg(params: ParameterSet) -> float:
    return float(sum(np.sum(np.square(t)) for t in _decayed(params)))


def sparsity_reg(params: ParameterSet) -> float:
    return float(sum(np.sum(np.abs(t)) for t in _mixing(params)))


def _breakdown(ce, smooth, wd, l1, cfg: TrainConfig) -> LossBreakdown:
    total = ce + cfg.mu1 * smooth + cfg.mu2 * wd + cfg.sparsity * l1
    return LossBreakdown(total, ce, smooth, wd, l1)


def loss(params: ParameterSet, problem: Problem, mask, cfg: TrainConfig, model_cfg: ModelConfig) -> LossBreakdown:
    y_hat = model_forward(problem.x, problem.powers, params, model_cfg).output
    return _breakdown(
        cross_entropy(y_hat, problem.labels, mask),
        smoothness_reg(y_hat, problem.powers, cfg.smoothness),
        weight_decay_reg(params),
        sparsity_reg(params),
        cfg,
    )


def gradients(
    params: ParameterSet, problem: Problem, mask, cfg: TrainConfig, model_cfg: ModelConfig
) -> tuple[ParameterSet, LossBreakdown]:
    """Reverse-mode gradient of the total objective, plus the loss it belongs to.

    Subgradient conventions: ReLU'(0) = 0 and d|r|/dr = 0 at r = 0. Where the
    probability floor inside the log is active the cross-entropy gradient is 0.
    """
    grads, lossb, _ = _gradients(params, problem, mask, cfg, model_cfg)
    return grads, lossb


def _gradients(params, problem, mask, cfg, model_cfg):
    m = _mask(mask)
    acts = model_forward(problem.x, problem.powers, params, model_cfg)
    y_hat = acts.output
    y = problem.labels.labels[m]
    if (y < 0).any():
        raise ValidationError("mask contains unlabeled nodes")
    p_true = y_hat[m, y]
    lossb = _breakdown(
        float(-np.log(np.maximum(p_true, PROB_FLOOR)).sum()),
        smoothness_reg(y_hat, problem.powers, cfg.smoothness),
        weight_decay_reg(params),
        sparsity_reg(params),
        cfg,
    )

    d_logits = np.zeros_like(y_hat)
    live = p_true >= PROB_FLOOR
    rows = m[live]
    d_logits[rows] = y_hat[rows]
    d_logits[rows, y[live]] -= 1.0
    if cfg.mu1:
        g = cfg.mu1 * _smoothness_grad(y_hat, problem.powers.adjacency, cfg.smoothness)
        d_logits += y_hat * (g - np.sum(g * y_hat, axis=1, keepdims=True))

    grads = model_backward(d_logits, acts, params, problem.powers, model_cfg)
    if cfg.mu2:
        for gt, pt in zip(_decayed(grads), _decayed(params)):
            gt += 2.0 * cfg.mu2 * pt
    if cfg.sparsity:
        for gt, pt in zip(_mixing(grads), _mixing(params)):
            gt += cfg.sparsity * np.sign(pt)
    return grads, lossb, y_hat


# -- finite-difference verification -----------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_parameter: tuple  # (tensor name, index tuple)
    passed: bool
    n_checked: int

    @property
    def pass_(self) -> bool:
        return self.passed


def grad_check(
    func: Callable[[], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare ``analytic`` against central differences of ``func``.

    ``func`` re-evaluates the scalar with the current contents of the arrays
    in ``params``, which are perturbed in place and restored. The relative
    error is ``|a - f| / max(|a|, |f|, 1e-8)``; entries where both magnitudes
    fall below 1e-10 are skipped.
    """
    worst, worst_at, checked = 0.0, ("", ()), 0
    for name, arr in params.items():
        grad = analytic[name]
        if grad.shape != arr.shape:
            raise ValidationError(f"{name}: gradient shape {grad.shape} != parameter shape {arr.shape}")
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            f_plus = func()
            arr[idx] = orig - step
            f_minus = func()
            arr[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            a = float(grad[idx])
            if abs(a) < 1e-10 and abs(fd) < 1e-10:
                continue
            checked += 1
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if rel > worst or not math.isfinite(rel):
                worst, worst_at = rel, (name, idx)
    return GradCheckReport(worst, worst_at, bool(worst < tolerance), checked)


def check_gradients(
    params: ParameterSet,
    problem: Problem,
    mask,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    corrupt: str | None = None,
) -> GradCheckReport:
    """Finite-difference check of :func:`gradients` on one instance.

    ``corrupt`` names a tensor whose first analytic entry is doubled, to show
    the checker catches a wrong gradient.
    """
    work = params.copy()
    grads, _ = gradients(work, problem, mask, cfg, model_cfg)
    analytic = grads.tensors()
    if corrupt is not None:
        if corrupt not in analytic:
            raise ValidationError(f"unknown tensor {corrupt!r}; expected one of {sorted(analytic)}")
        bad = analytic[corrupt].copy()
        first = (0,) * bad.ndim
        bad[first] = 2.0 * bad[first] if bad[first] != 0 else 1.0
        analytic[corrupt] = bad
    return grad_check(lambda: loss(work, problem, mask, cfg, model_cfg).total, work.tensors(), analytic, step, tolerance)


# -- optimisation ------------------------------------------------------------

@dataclass
class OptimizerState:
    first_moment: dict
    second_moment: dict
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ParameterSet) -> "OptimizerState":
        zeros = {k: np.zeros_like(v) for k, v in params.tensors().items()}
        return cls(zeros, {k: v.copy() for k, v in zeros.items()})


def adam_step(params: ParameterSet, grads: ParameterSet, state: OptimizerState, lr: float) -> tuple[ParameterSet, OptimizerState]:
    """Bias-corrected Adam update. Inputs are left untouched."""
    p, g = params.tensors(), grads.tensors()
    if p.keys() != g.keys() or p.keys() != state.first_moment.keys():
        raise ValidationError("parameters, gradients and optimizer state disagree on tensor names")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k in p:
        if g[k].shape != p[k].shape:
            raise ValidationError(f"{k}: gradient shape {g[k].shape} != parameter shape {p[k].shape}")
        m = b1 * state.first_moment[k] + (1.0 - b1) * g[k]
        v = b2 * state.second_moment[k] + (1.0 - b2) * (g[k] * g[k])
        new_p[k] = p[k] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    out = ParameterSet.from_tensors(new_p, params.n_layers, params.x_params is not None)
    return out, OptimizerState(new_m, new_v, t, b1, b2, state.eps)


# -- metrics -----------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    per_class_f1: tuple

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "per_class_f1": list(self.per_class_f1)}


def classification_metrics(y_true, y_pred, n_classes: int) -> Metrics:
    """Accuracy and macro-F1 over all ``n_classes`` (F1 of a class is 0 when P + R = 0)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValidationError("cannot score an empty prediction set")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    tp = np.diag(conf).astype(float)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return Metrics(float(tp.sum() / y_true.size), float(f1.mean()), tuple(float(v) for v in f1))


def evaluate(params: ParameterSet, problem: Problem, mask, model_cfg: ModelConfig) -> Metrics:
    m = _mask(mask)
    y_hat = model_forward(problem.x, problem.powers, params, model_cfg).output
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return classification_metrics(problem.labels.labels[m], np.argmax(y_hat[m], axis=1), problem.labels.n_classes)


# -- training loop -----------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: LossBreakdown
    val_accuracy: float
    val_loss: float

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, **self.loss.to_dict(), "val_accuracy": self.val_accuracy, "val_loss": self.val_loss}


@dataclass
class TrainResult:
    best_params: ParameterSet
    best_epoch: int
    history: list = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def train(
    problem: Problem,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    init: ParameterSet | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Full-batch Adam on the train mask with early stopping on the val mask.

    Each history record describes the parameters at the start of that epoch
    (before its update); the returned parameters are those of the record with
    the best validation metric. Training stops once ``patience`` consecutive
    epochs fail to improve it, or after ``max_epochs``.
    """
    labels = problem.labels
    train_mask = _mask(labels.train_mask)
    val_mask = labels.val_mask
    if val_mask.size == 0:
        raise ValidationError("validation mask is empty")
    params = init.copy() if init is not None else init_params(model_cfg, cfg.seed)
    check_params(params, model_cfg)
    state = OptimizerState.fresh(params)
    val_y = labels.labels[val_mask]
    use_acc = cfg.es_metric == "val_accuracy"

    best, best_epoch, best_score, stale = params, 0, (-math.inf,), 0
    history = []
    for epoch in range(cfg.max_epochs):
        grads, lossb, y_hat = _gradients(params, problem, train_mask, cfg, model_cfg)
        val_acc = float(np.mean(np.argmax(y_hat[val_mask], axis=1) == val_y))
        val_loss = cross_entropy(y_hat, labels, val_mask) / val_mask.size
        if not (math.isfinite(lossb.total) and math.isfinite(val_loss)):
            raise NumericError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        rec = EpochRecord(epoch, lossb, val_acc, val_loss)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        # ties in validation accuracy are broken by validation loss
        score = (val_acc, -val_loss) if use_acc else (-val_loss,)
        if score > best_score:
            best, best_epoch, best_score, stale = params, epoch, score, 0
        else:
            stale += 1
            if stale > cfg.patience:
                log.debug("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
        params, state = adam_step(params, grads, state, cfg.learning_rate)
    return TrainResult(best.copy(), best_epoch, history)


def gradcheck_instance(
    seed: int = 0,
    r_mode: str = "per_node",
    w_mode: str = "per_node",
    residual: bool = True,
    n_nodes: int = 12,
    i_count: int = 3,
    k_hop: int = 2,
    widths: tuple = (5, 3),
    in_features: int = 4,
    n_classes: int = 3,
):
    """Small random instance for finite-difference checks.

    Returns ``(params, problem, mask, train_cfg, model_cfg)``. Every node is
    labelled and in the mask, inputs are small so the softmax stays
    unsaturated, and parameters are kept at least 1e-3 away from zero, so
    no entry sits on an l1 kink or has a vanishing decay gradient.
    """
    from .edge_dither import DitherConfig, dither
    from .graph_core import Graph

    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n_nodes, k=1)
    keep = rng.random(iu.size) < 0.25
    source = Graph(n_nodes, np.stack([iu[keep], ju[keep]], axis=1))
    graphs = dither(source, DitherConfig(0.9, 0.95, i_count, seed))
    x = rng.uniform(0.0, 0.05, size=(n_nodes, in_features))
    nodes = np.arange(n_nodes)
    labels = LabelData(nodes % n_classes, n_classes, nodes, np.empty(0, np.int64), np.empty(0, np.int64))
    model_cfg = ModelConfig(n_nodes, in_features, n_classes, i_count, widths, k_hop, r_mode, w_mode, residual)

    def jitter(a):
        a = a + 0.02 * rng.standard_normal(a.shape)
        small = np.abs(a) < 1e-3
        a[small] = np.where(a[small] < 0, -1e-3, 1e-3)
        return a

    params = init_params(model_cfg, seed).map(jitter)
    train_cfg = TrainConfig(mu1=0.1, mu2=0.01, sparsity=0.01)
    return params, Problem.build(x, graphs, labels, k_hop), nodes, train_cfg, model_cfg
