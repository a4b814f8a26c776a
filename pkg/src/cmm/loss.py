"""Margin losses against an adaptive threshold logit.

Every loss here works on the signed distances between relation logits and
the threshold logit t_TH (index 0):

    d_pos[r] = t_r - t_TH   for labeled-positive relations,
    d_neg[r] = t_TH - t_r   for labeled-negative relations,

so a correctly ordered relation always has a positive distance. Three
concrete losses are provided:

* ``plain_margin_loss`` -- the naive sum of negated distances. Unbounded
  below; kept verbatim as a comparison arm.
* ``cmm_loss`` -- the concentrated margin loss. Distances are rescaled to
  log-sigmoid space, positive terms are amplified by a focusing power
  (1 - q)**gamma, and negative terms are clamped to exactly zero (value
  and gradient) once sigma(d) + m >= 1, i.e. for d >= log((1 - m) / m).
* ``atl_reference_loss`` -- a two-part adaptive-threshold softmax baseline:
  each positive is scored against positives-plus-TH, and TH is scored
  against negatives-plus-TH.

Analytic gradients are exact and verified against central finite
differences by the gradcheck module. Additional (value, gradient) pairs
can be registered under ``kind="plugin"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import NumericError, SchemaError
from .schema import LabelSet

GAMMA_GRID = (1.0, 1.2, 1.4, 1.6, 2.0)
M_GRID = (0.1, 0.2, 0.3, 0.4)
LOSS_KINDS = ("plain_margin", "cmm", "atl_reference", "plugin")
AGGREGATIONS = ("per_document_sum", "global_mean")
POSITIVE, NEGATIVE = "positive", "negative"


@dataclass(frozen=True)
class LossConfig:
    """Loss kind plus hyperparameters.

    ``gamma`` is the focusing exponent on positive terms, ``m`` the additive
    shift that sets the negative-side clamp; both are ignored by
    plain_margin and atl_reference. ``aggregation`` controls how the trainer
    reduces per-pair losses inside one optimizer step.
    """

    kind: str = "cmm"
    gamma: float = 1.0
    m: float = 0.2
    aggregation: str = "per_document_sum"
    plugin: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not (math.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if not (math.isfinite(self.m) and 0.0 < self.m < 1.0):
            raise ValueError(f"m must be strictly inside (0, 1), got {self.m}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.kind == "plugin" and not self.plugin:
            raise ValueError("kind='plugin' requires a registered plugin name")


@dataclass(frozen=True)
class DistanceSet:
    """Signed logit-to-threshold distances, keyed by relation index."""

    d_pos: dict[int, float]
    d_neg: dict[int, float]


# --- numerically stable primitives ---------------------------------------

def log_sigmoid(d):
    """log(sigma(d)) computed as -softplus(-d); stable for any finite d."""
    return -np.logaddexp(0.0, -np.asarray(d, dtype=np.float64))


def sigmoid(d):
    d = np.asarray(d, dtype=np.float64)
    # evaluate each branch on clipped input so neither side overflows
    pos = 1.0 / (1.0 + np.exp(-np.maximum(d, 0.0)))
    en = np.exp(np.minimum(d, 0.0))
    neg = en / (1.0 + en)
    return np.where(d >= 0.0, pos, neg)


def clamp_distance(m: float) -> float:
    """Distance beyond which a negative contributes zero loss and gradient."""
    return math.log((1.0 - m) / m)


def _log_sigmoid_plus_m(d, m: float):
    """log(sigma(d) + m) for the unclamped region, stable for d << 0 (limit log m)."""
    d = np.asarray(d, dtype=np.float64)
    en = np.exp(np.minimum(d, 0.0))
    low = np.log(m + (1.0 + m) * en) - np.log1p(en)
    ep = np.exp(-np.maximum(d, 0.0))
    high = np.log1p(m + m * ep) - np.log1p(ep)
    return np.where(d <= 0.0, low, high)


def _positive_terms(d, gamma: float, need_grad: bool):
    """Per-relation positive loss term -(1-q)**gamma * q with q = log(sigma(d)).

    Returns (term, dterm/dd). (1-q) >= 1 always, so the power is taken as
    exp(gamma * log1p(-q)), which supports non-integer gamma.
    """
    d = np.asarray(d, dtype=np.float64)
    q = log_sigmoid(d)
    log1mq = np.log1p(-q)
    powg = np.exp(gamma * log1mq)
    term = powg * (-q)
    if not need_grad:
        return term, None
    powgm1 = np.exp((gamma - 1.0) * log1mq)
    dterm = powgm1 * (gamma * q - (1.0 - q)) * sigmoid(-d)
    return term, dterm


def _negative_terms(d, m: float, need_grad: bool):
    """Per-relation negative loss term -log(min(sigma(d) + m, 1)).

    Exactly zero, with exactly zero derivative, for d >= log((1-m)/m).
    The two exponentials are shared between the value and the sigmoid
    needed for the derivative; this sits on the training hot path.
    """
    d = np.asarray(d, dtype=np.float64)
    clamped = d >= clamp_distance(m)
    low_side = d <= 0.0
    en = np.exp(np.minimum(d, 0.0))     # e^d on the low side, <= 1
    ep = np.exp(-np.maximum(d, 0.0))    # e^-d on the high side, <= 1
    q = np.where(low_side,
                 np.log(m + (1.0 + m) * en) - np.log1p(en),
                 np.log1p(m + m * ep) - np.log1p(ep))
    term = np.where(clamped, 0.0, -q)
    if not need_grad:
        return term, None
    s = np.where(low_side, en / (1.0 + en), 1.0 / (1.0 + ep))
    dterm = np.where(clamped, 0.0, -(s * (1.0 - s)) / (s + m))
    return term, dterm


# --- single-row operations (public surface) -------------------------------

def _as_values(logits) -> np.ndarray:
    values = np.asarray(getattr(logits, "values", logits), dtype=np.float64)
    if values.ndim != 1:
        raise SchemaError(f"expected a 1-D logit row, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise NumericError("logit row contains non-finite values")
    return values


def _check_lengths(values: np.ndarray, labels: LabelSet) -> None:
    if values.size != labels.relation_count + 1:
        raise SchemaError(
            f"logit row length {values.size} does not match relation_count "
            f"{labels.relation_count} (+1 for TH)"
        )


def _index_arrays(labels: LabelSet) -> tuple[np.ndarray, np.ndarray]:
    pos = np.array(sorted(labels.positives), dtype=np.intp)
    neg = np.array(sorted(labels.negatives), dtype=np.intp)
    return pos, neg


def margin_distances(logits, labels: LabelSet) -> DistanceSet:
    """Signed distances of every labeled relation logit to the TH logit."""
    values = _as_values(logits)
    _check_lengths(values, labels)
    th = values[0]
    d_pos = {int(r): float(values[r] - th) for r in sorted(labels.positives)}
    d_neg = {int(r): float(th - values[r]) for r in sorted(labels.negatives)}
    return DistanceSet(d_pos=d_pos, d_neg=d_neg)


def plain_margin_loss(logits, labels: LabelSet) -> float:
    """Sum of negated distances over positives and negatives; unbounded below."""
    values = _as_values(logits)
    _check_lengths(values, labels)
    pos, neg = _index_arrays(labels)
    th = values[0]
    return float(-(values[pos] - th).sum() - (th - values[neg]).sum())


def plain_margin_grad(logits, labels: LabelSet, cfg: LossConfig | None = None) -> np.ndarray:
    """Gradient of plain_margin_loss: -1 on positives, +1 on negatives, |P|-|N| on TH."""
    values = _as_values(logits)
    _check_lengths(values, labels)
    pos, neg = _index_arrays(labels)
    grad = np.zeros_like(values)
    grad[pos] = -1.0
    grad[neg] = 1.0
    grad[0] = len(pos) - len(neg)
    return grad


def cmm_rescale(d: float, side: str, m: float | None = None) -> float:
    """Rescale one margin distance to log-sigmoid space.

    Positive side returns log(sigma(d)) in (-inf, 0); negative side returns
    log(min(sigma(d) + m, 1)) in (log m, 0], exactly 0 once sigma(d) + m >= 1.
    """
    if side == POSITIVE:
        return float(log_sigmoid(d))
    if side == NEGATIVE:
        if m is None or not 0.0 < m < 1.0:
            raise ValueError(f"negative side requires m in (0, 1), got {m}")
        if d >= clamp_distance(m):
            return 0.0
        return float(_log_sigmoid_plus_m(d, m))
    raise ValueError(f"side must be {POSITIVE!r} or {NEGATIVE!r}, got {side!r}")


def _require_kind(cfg: LossConfig, kind: str) -> None:
    if cfg.kind != kind:
        raise ValueError(f"expected cfg.kind={kind!r}, got {cfg.kind!r}")


def cmm_loss(logits, labels: LabelSet, cfg: LossConfig) -> float:
    """Concentrated margin loss for one logit row; always >= 0.

    Positive terms -(1-q)**gamma * q focus weight on small distances; negative
    terms -log(min(sigma(d)+m, 1)) vanish once a negative is confidently
    separated. An empty positive set contributes nothing to the first sum.
    """
    _require_kind(cfg, "cmm")
    values = _as_values(logits)
    _check_lengths(values, labels)
    pos, neg = _index_arrays(labels)
    th = values[0]
    tp, _ = _positive_terms(values[pos] - th, cfg.gamma, need_grad=False)
    tn, _ = _negative_terms(th - values[neg], cfg.m, need_grad=False)
    return float(tp.sum() + tn.sum())


def cmm_loss_grad(logits, labels: LabelSet, cfg: LossConfig) -> np.ndarray:
    """Analytic gradient of cmm_loss with respect to every logit, TH included.

    The TH entry accumulates contributions of opposite sign from the two
    sides; a clamped negative contributes exactly zero everywhere.
    """
    _require_kind(cfg, "cmm")
    values = _as_values(logits)
    _check_lengths(values, labels)
    pos, neg = _index_arrays(labels)
    th = values[0]
    _, gp = _positive_terms(values[pos] - th, cfg.gamma, need_grad=True)
    _, gn = _negative_terms(th - values[neg], cfg.m, need_grad=True)
    grad = np.zeros_like(values)
    grad[pos] = gp          # d(term)/dt_r = dterm/dd * (+1)
    grad[neg] = -gn         # d = t_TH - t_r, so dt_r picks up a sign flip
    grad[0] = gn.sum() - gp.sum()
    return grad


def cmm_positive_term(d, gamma: float) -> np.ndarray:
    """Per-relation positive loss term -(1-q)**gamma * q at distance(s) d."""
    term, _ = _positive_terms(d, gamma, need_grad=False)
    return term


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    mx = a.max(axis=1)
    return mx + np.log(np.exp(a - mx[:, None]).sum(axis=1))


def atl_reference_loss(logits, labels: LabelSet) -> float:
    """Adaptive-threshold softmax baseline.

    Each positive logit is log-softmaxed against positives-plus-TH, and the
    TH logit against negatives-plus-TH; the loss is the sum of the negated
    log-probabilities. Nonnegative; zero in the fully separated limit.
    """
    values = _as_values(logits)
    _check_lengths(values, labels)
    pos, neg = _index_arrays(labels)
    th = values[0]
    loss = 0.0
    if len(pos):
        z1 = float(np.logaddexp.reduce(np.concatenate([values[pos], [th]])))
        loss += len(pos) * z1 - float(values[pos].sum())
    z2 = float(np.logaddexp.reduce(np.concatenate([values[neg], [th]])))
    loss += z2 - th
    return loss


def atl_reference_grad(logits, labels: LabelSet, cfg: LossConfig | None = None) -> np.ndarray:
    """Analytic gradient of atl_reference_loss (softmax derivatives)."""
    values = _as_values(logits)
    _check_lengths(values, labels)
    pos, neg = _index_arrays(labels)
    th = values[0]
    grad = np.zeros_like(values)
    if len(pos):
        group1 = np.concatenate([values[pos], [th]])
        z1 = np.logaddexp.reduce(group1)
        p1 = np.exp(group1 - z1)
        grad[pos] += len(pos) * p1[:-1] - 1.0
        grad[0] += len(pos) * p1[-1]
    group2 = np.concatenate([values[neg], [th]])
    z2 = np.logaddexp.reduce(group2)
    p2 = np.exp(group2 - z2)
    grad[neg] += p2[:-1]
    grad[0] += p2[-1] - 1.0
    return grad


# --- batched core (mask layout: column j <-> relation j+1) ----------------

def batch_rows(kind: str, logits2d: np.ndarray, pos_mask: np.ndarray, cfg: LossConfig,
               need_grad: bool) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-row loss values (and optionally dL/dlogits) for a batch of pairs.

    ``pos_mask`` is boolean (n, R); labels are assumed complement-consistent.
    Used by the trainer; single-row public operations above stay the
    reference semantics.
    """
    t = np.asarray(logits2d, dtype=np.float64)
    dist = t[:, 1:] - t[:, :1]
    if kind == "cmm":
        # positives are sparse: evaluate the negative side everywhere, then
        # overwrite the gathered positive entries
        pos_idx = np.nonzero(pos_mask)
        tn, gn = _negative_terms(-dist, cfg.m, need_grad)
        tp, gp = _positive_terms(dist[pos_idx], cfg.gamma, need_grad)
        terms = tn
        terms[pos_idx] = tp
        rows = terms.sum(axis=1)
        if not need_grad:
            return rows, None
        ddist = -gn
        ddist[pos_idx] = gp
    elif kind == "plain_margin":
        rows = np.where(pos_mask, -dist, dist).sum(axis=1)
        if not need_grad:
            return rows, None
        ddist = np.where(pos_mask, -1.0, 1.0)
    elif kind == "atl_reference":
        return _atl_batch(t, pos_mask, need_grad)
    else:
        raise ValueError(f"no batched form for kind {kind!r}")
    grad = np.empty_like(t)
    grad[:, 1:] = ddist
    grad[:, 0] = -ddist.sum(axis=1)
    return rows, grad


def _atl_batch(t: np.ndarray, pos_mask: np.ndarray,
               need_grad: bool) -> tuple[np.ndarray, np.ndarray | None]:
    n = t.shape[0]
    th_col = np.ones((n, 1), dtype=bool)
    mask1 = np.concatenate([th_col, pos_mask], axis=1)
    mask2 = np.concatenate([th_col, ~pos_mask], axis=1)
    neg_inf = -np.inf
    a1 = np.where(mask1, t, neg_inf)
    a2 = np.where(mask2, t, neg_inf)
    z1 = _logsumexp_rows(a1)
    z2 = _logsumexp_rows(a2)
    n_pos = pos_mask.sum(axis=1)
    rows = (n_pos * z1 - np.where(pos_mask, t[:, 1:], 0.0).sum(axis=1)) + (z2 - t[:, 0])
    if not need_grad:
        return rows, None
    p1 = np.exp(a1 - z1[:, None])
    p2 = np.exp(a2 - z2[:, None])
    grad = n_pos[:, None] * p1 + p2
    grad[:, 1:] -= pos_mask
    grad[:, 0] -= 1.0
    return rows, grad


# --- pluggable loss interface ---------------------------------------------

class LossFunctions(NamedTuple):
    value: Callable[..., float]
    grad: Callable[..., np.ndarray]


_BUILTIN: dict[str, LossFunctions] = {
    "plain_margin": LossFunctions(lambda lg, lb, cfg=None: plain_margin_loss(lg, lb),
                                  plain_margin_grad),
    "cmm": LossFunctions(cmm_loss, cmm_loss_grad),
    "atl_reference": LossFunctions(lambda lg, lb, cfg=None: atl_reference_loss(lg, lb),
                                   atl_reference_grad),
}

_PLUGINS: dict[str, LossFunctions] = {}


def register_loss(name: str, value_fn: Callable[..., float],
                  grad_fn: Callable[..., np.ndarray]) -> None:
    """Register an external (value, gradient) pair usable via kind='plugin'."""
    if name in _BUILTIN:
        raise ValueError(f"{name!r} shadows a built-in loss")
    _PLUGINS[name] = LossFunctions(value_fn, grad_fn)


def get_loss(cfg: LossConfig) -> LossFunctions:
    """Resolve cfg to a (value, gradient) pair, each taking (logits, labels, cfg)."""
    if cfg.kind == "plugin":
        try:
            return _PLUGINS[cfg.plugin]  # type: ignore[index]
        except KeyError:
            raise ValueError(f"no registered plugin loss named {cfg.plugin!r}") from None
    return _BUILTIN[cfg.kind]
