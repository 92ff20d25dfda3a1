"""Gated fusion of three aligned expert outputs.

A single linear layer reduces the concatenated experts to a routing
feature E; gate logits are E @ Z_g plus, when noise is active, elementwise
standard-normal draws scaled by softplus(E @ Z_n). Row-softmax yields
convex weights (alpha, beta, gamma) and the output is the weighted sum of
the raw expert rows - the routing feature never enters the output.

Feature-level fusion (``moe_fuse``) adds noise whenever train_mode is
set; logit-level fusion (``moe_fuse_logits``) multiplies the noise term
by the train/inference switch ``zeta``. Z_g and Z_n start at zero, so a
fresh layer routes uniformly and outputs the plain expert average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ShapeError
from .params import ParameterStore, glorot_uniform


def init_moe_params(store: ParameterStore, channels: int, rng, prefix="moe"):
    """Fusion linear (3*channels -> channels) plus zero gate/noise weights."""
    store.add(f"{prefix}.fusion.w", glorot_uniform((3 * channels, channels), rng))
    store.add(f"{prefix}.fusion.b", np.zeros(channels, np.float32))
    store.add(f"{prefix}.z_gate", np.zeros((channels, 3), np.float32))
    store.add(f"{prefix}.z_noise", np.zeros((channels, 3), np.float32))


@dataclass(frozen=True)
class GateScores:
    """Per-row convex weights over (range, voxel, point)."""

    gates: np.ndarray

    @property
    def alpha(self):
        return self.gates[:, 0]

    @property
    def beta(self):
        return self.gates[:, 1]

    @property
    def gamma(self):
        return self.gates[:, 2]


def build_moe(ctx, expert_r, expert_v, expert_p, prefix="moe",
              noise_active=False, noise_tag="moe"):
    """Composable fusion; returns (fused Var, gates Var)."""
    n = expert_r.shape[0]
    if expert_v.shape != expert_r.shape or expert_p.shape != expert_r.shape:
        raise ShapeError("expert feature shapes disagree")
    e = ad.add(ad.matmul(ad.concat_cols([expert_r, expert_v, expert_p]),
                         ctx.param(f"{prefix}.fusion.w")),
               ctx.param(f"{prefix}.fusion.b"))
    logits = ad.matmul(e, ctx.param(f"{prefix}.z_gate"))
    if noise_active:
        scale = ad.softplus(ad.matmul(e, ctx.param(f"{prefix}.z_noise")))
        chi = ad.as_var(ctx.randn((n, 3), noise_tag))
        logits = ad.add(logits, ad.mul(chi, scale))
    gates = ad.softmax_rows(logits)
    alpha = ad.slice_cols(gates, 0, 1)
    beta = ad.slice_cols(gates, 1, 2)
    gamma = ad.slice_cols(gates, 2, 3)
    fused = ad.add(ad.add(ad.mul(alpha, expert_r), ad.mul(beta, expert_v)),
                   ad.mul(gamma, expert_p))
    return fused, gates


def _run_fusion(feats_r, feats_v, feats_p, params, noise_active, seed, prefix):
    def build(ctx):
        fused, gates = build_moe(ctx, ctx.input("r"), ctx.input("v"),
                                 ctx.input("p"), prefix,
                                 noise_active=noise_active)
        return {"fused": fused, "gates": gates}

    outs = ad.evaluate(Graph(build), params,
                       {"r": feats_r, "v": feats_v, "p": feats_p}, seed=seed)
    return outs["fused"], GateScores(outs["gates"])


def moe_fuse(feats_r, feats_v, feats_p, params: ParameterStore,
             train_mode: bool, seed: int = 0, prefix="moe"):
    """Feature-level fusion of aligned (N, D) expert features.

    Noise is applied whenever ``train_mode`` is set; the inference path
    omits it and is bit-deterministic.
    """
    return _run_fusion(feats_r, feats_v, feats_p, params, train_mode, seed, prefix)


def moe_fuse_logits(logits_r, logits_v, logits_p, params: ParameterStore,
                    zeta: int, seed: int = 0, prefix="moe"):
    """Logit-level fusion of aligned (N, C) logits.

    ``zeta`` is 1 during training (noise on) and 0 at inference.
    """
    if zeta not in (0, 1):
        raise ValueError("zeta must be 0 or 1")
    return _run_fusion(logits_r, logits_v, logits_p, params, zeta == 1, seed, prefix)


def write_gate_csv(path, scores: GateScores) -> None:
    """Per-point gate export: point_id, alpha, beta, gamma."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("point_id,alpha,beta,gamma\n")
        for i, (a, b, g) in enumerate(scores.gates.tolist()):
            fh.write(f"{i},{a!r},{b!r},{g!r}\n")


def read_gate_csv(path) -> GateScores:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("point_id"):
            raise ValueError("not a gate-score CSV")
        for line in fh:
            _, a, b, g = line.strip().split(",")
            rows.append((float(a), float(b), float(g)))
    return GateScores(np.array(rows, np.float32).reshape(-1, 3))
