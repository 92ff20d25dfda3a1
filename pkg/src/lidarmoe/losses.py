"""Training objectives: grouped contrastive loss, cross-entropy,
Lovasz-softmax, and the supervised multi-representation composite.

The contrastive loss L2-normalizes both embedding matrices, scores every
pair by dot product over a temperature, and averages the negative log of
the matched pair's softmax probability. By default the denominator runs
over all columns including the match; ``denominator="exclude_positive"``
drops the matched column instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .params import ParameterStore


class LossContractError(ValueError):
    """Loss inputs violate a documented precondition."""


@dataclass(frozen=True)
class LossConfig:
    """Temperature, per-representation term weights, and the ignore label."""

    temperature: float = 0.07
    ignore: int = -1
    denominator: str = "all"
    weights: dict = field(default_factory=lambda: {
        "fused": {"ce": 1.0, "lovasz": 0.0},
        "range": {"ce": 1.0, "lovasz": 2.0},
        "voxel": {"ce": 1.0, "lovasz": 2.0},
        "point": {"ce": 1.0, "lovasz": 0.0},
    })

    def __post_init__(self):
        if self.temperature <= 0:
            raise LossContractError("temperature must be positive")
        if self.denominator not in ("all", "exclude_positive"):
            raise LossContractError("denominator must be all|exclude_positive")
        for rep in self.weights.values():
            if any(w < 0 for w in rep.values()):
                raise LossContractError("loss weights must be >= 0")


def _normalize_rows(x):
    sq = ad.sum_cols(ad.mul(x, x))
    inv = ad.div(ad.as_var(np.float32(1.0)), ad.sqrt(ad.add(sq, ad.as_var(np.float32(1e-12)))))
    return ad.mul(x, inv)


def build_info_nce(k_var, q_var, temperature, denominator="all"):
    """Composable contrastive loss over matched embedding rows."""
    s = k_var.shape[0]
    if s < 2:
        raise LossContractError("contrastive loss needs at least 2 rows")
    if q_var.shape != k_var.shape:
        raise LossContractError("embedding shapes disagree")
    kn = _normalize_rows(k_var)
    qn = _normalize_rows(q_var)
    scaled = ad.mul(ad.matmul(kn, ad.transpose(qn)),
                    ad.as_var(np.float32(1.0 / temperature)))
    pos = ad.take_diag(scaled)
    if denominator == "all":
        lse = ad.logsumexp_rows(scaled)
    else:
        mask = np.zeros((s, s), np.float32)
        np.fill_diagonal(mask, -1e4)
        lse = ad.logsumexp_rows(ad.add(scaled, ad.as_var(mask)))
    return ad.neg(ad.mean_all(ad.sub(pos, lse)))


def info_nce(k: np.ndarray, q: np.ndarray, temperature: float,
             denominator: str = "all") -> float:
    graph = Graph(lambda ctx: {"loss": build_info_nce(
        ctx.input("k"), ctx.input("q"), temperature, denominator)})
    out = ad.evaluate(graph, ParameterStore(), {"k": k, "q": q})
    return float(out["loss"])


def build_cross_entropy(logits_var, labels, ignore=-1):
    """Mean negative log-likelihood over non-ignored rows."""
    labels = np.asarray(labels, np.int64).reshape(-1)
    if labels.shape[0] != logits_var.shape[0]:
        raise LossContractError("labels and logits row counts disagree")
    keep = np.flatnonzero(labels != ignore)
    if keep.size == 0:
        raise LossContractError("all labels are ignored")
    c = logits_var.shape[1]
    logp = ad.log_softmax_rows(ad.gather_rows(logits_var, keep))
    onehot = np.zeros((keep.size, c), np.float32)
    onehot[np.arange(keep.size), labels[keep]] = 1.0
    picked = ad.sum_cols(ad.mul(logp, ad.as_var(onehot)))
    return ad.neg(ad.mean_all(picked))


def cross_entropy(logits: np.ndarray, labels, ignore: int = -1) -> float:
    graph = Graph(lambda ctx: {"loss": build_cross_entropy(
        ctx.input("logits"), labels, ignore)})
    return float(ad.evaluate(graph, ParameterStore(), {"logits": logits})["loss"])


def jaccard_extension_grad(fg_sorted: np.ndarray) -> np.ndarray:
    """Discrete gradient of the Jaccard-loss extension along a sorted
    error prefix (first differences of the prefix Jaccard losses)."""
    fg = fg_sorted.astype(np.float64)
    gts = fg.sum()
    intersection = gts - np.cumsum(fg)
    union = gts + np.cumsum(1.0 - fg)
    jaccard = 1.0 - intersection / union
    out = jaccard.copy()
    out[1:] = jaccard[1:] - jaccard[:-1]
    return out


def build_lovasz_softmax(probs_var, labels, ignore=-1):
    """Composable Lovasz-softmax over probability rows.

    For every class present in the labels, the per-point errors
    (1 - p for the class's points, p elsewhere) are sorted descending and
    dotted with the Jaccard-extension gradient; the result is averaged
    over present classes. The sort order is treated as constant, so
    gradients flow through the error values.
    """
    labels = np.asarray(labels, np.int64).reshape(-1)
    if labels.shape[0] != probs_var.shape[0]:
        raise LossContractError("labels and probability row counts disagree")
    sums = probs_var.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-5):
        raise LossContractError("probability rows must sum to 1")
    keep = np.flatnonzero(labels != ignore)
    if keep.size == 0:
        raise LossContractError("all labels are ignored")
    probs_kept = ad.gather_rows(probs_var, keep)
    kept_labels = labels[keep]
    present = np.unique(kept_labels)
    terms = None
    for c in present.tolist():
        p_c = ad.slice_cols(probs_kept, c, c + 1)
        fg = (kept_labels == c).astype(np.float32)[:, None]
        errors = ad.add(ad.mul(p_c, ad.as_var(1.0 - 2.0 * fg)), ad.as_var(fg))
        order = np.argsort(-errors.data[:, 0], kind="stable")
        grad = jaccard_extension_grad(fg[order, 0]).astype(np.float32)[:, None]
        term = ad.sum_all(ad.mul(ad.gather_rows(errors, order), ad.as_var(grad)))
        terms = term if terms is None else ad.add(terms, term)
    return ad.mul(terms, ad.as_var(np.float32(1.0 / present.size)))


def lovasz_softmax(probs: np.ndarray, labels, ignore: int = -1) -> float:
    graph = Graph(lambda ctx: {"loss": build_lovasz_softmax(
        ctx.input("probs"), labels, ignore)})
    return float(ad.evaluate(graph, ParameterStore(), {"probs": probs})["loss"])


def build_sms_total(logits_by_rep: dict, labels_by_rep: dict,
                    config: LossConfig):
    """Composable supervised composite; returns (total Var, breakdown Vars).

    ``logits_by_rep`` maps {fused, range, voxel, point} to logit Vars;
    ``labels_by_rep`` maps the same keys to integer label vectors in the
    matching row space.
    """
    total = None
    breakdown = {}
    for rep in ("fused", "range", "voxel", "point"):
        logits = logits_by_rep[rep]
        labels = labels_by_rep[rep]
        w = config.weights.get(rep, {"ce": 0.0, "lovasz": 0.0})
        if w.get("ce", 0.0) > 0.0:
            term = ad.mul(build_cross_entropy(logits, labels, config.ignore),
                          ad.as_var(np.float32(w["ce"])))
            breakdown[f"{rep}_ce"] = term
            total = term if total is None else ad.add(total, term)
        if w.get("lovasz", 0.0) > 0.0:
            probs = ad.softmax_rows(logits)
            term = ad.mul(build_lovasz_softmax(probs, labels, config.ignore),
                          ad.as_var(np.float32(w["lovasz"])))
            breakdown[f"{rep}_lovasz"] = term
            total = term if total is None else ad.add(total, term)
    if total is None:
        raise LossContractError("all loss weights are zero")
    return total, breakdown


def sms_total(logits_by_rep: dict, labels_by_rep: dict,
              config: LossConfig = LossConfig()):
    """Evaluated composite loss; returns (total, per-term breakdown)."""
    def build(ctx):
        logits = {rep: ctx.input(rep) for rep in logits_by_rep}
        total, breakdown = build_sms_total(logits, labels_by_rep, config)
        out = {"loss": total}
        out.update(breakdown)
        return out

    outs = ad.evaluate(Graph(build), ParameterStore(), dict(logits_by_rep))
    total = float(outs.pop("loss"))
    return total, {k: float(v) for k, v in outs.items()}
