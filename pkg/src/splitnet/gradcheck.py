"""Finite-difference check of the co-training loss gradient.

The oracle side re-evaluates the total loss in extended precision
(``np.longdouble``) with its own straight-line forward pass, so the check does
not share code with the analytic path and the difference quotient is not
swamped by float64 rounding on small gradient entries.
"""

from __future__ import annotations

import numpy as np

from .archspec import mlp_spec
from .cotrain import total_loss
from .numerics import Affine, MemberModel, ReLU

LD = np.longdouble


def reference_loss(models, x, y, lam: float) -> LD:
    """Sum of member cross entropies plus ``lam`` times the JS term, in long double."""
    probs = []
    for m in models:
        h = np.asarray(x, dtype=LD)
        for layer in m.layers:
            if isinstance(layer, Affine):
                h = h @ layer.params["weight"].astype(LD) + layer.params["bias"].astype(LD)
            elif isinstance(layer, ReLU):
                h = np.maximum(h, LD(0))
            else:
                raise TypeError("reference_loss handles MLP members only")
        h = h - h.max(axis=1, keepdims=True)
        e = np.exp(h)
        probs.append(e / e.sum(axis=1, keepdims=True))
    n = len(y)
    rows = np.arange(n)
    ce = sum(-np.log(p[rows, y]).sum() / n for p in probs)

    def ent(p):
        return -(p * np.log(p)).sum(axis=1)

    mean = sum(probs) / len(probs)
    cot = (ent(mean) - sum(ent(p) for p in probs) / len(probs)).mean() if len(probs) > 1 else LD(0)
    return ce + LD(lam) * cot


def gradcheck(seed: int, n_models: int = 3, n_params: int = 100, eps: float = 1e-6,
              S: int = 2, lam: float = 0.5) -> float:
    """Worst relative error |analytic - numeric| / max(|analytic|, |numeric|) over sampled parameters.

    Builds ``n_models`` random groups of ``S`` small MLP members and samples
    ``n_params`` parameters from each group.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(n_models):
        spec = mlp_spec(f"g{k}", 4, [6, 5], 3)
        models = [MemberModel.from_spec(spec, i, seed * 100 + 10 * k + i) for i in range(S)]
        # random biases too: with zero biases a sample whose ReLUs are all off puts the
        # next pre-activation exactly on the kink, where central differences are meaningless
        for m in models:
            for name, p in m.named_params():
                if name.endswith(".bias"):
                    p[...] = rng.normal(0.0, 0.5, p.shape)
        x = rng.standard_normal((8, 4))
        y = rng.integers(0, 3, 8)
        terms = total_loss([m.forward(x) for m in models], y, lam)
        for m, g in zip(models, terms.grad_logits):
            m.backward(g)
        picks = [(i, name, j) for i, m in enumerate(models) for name, p in m.named_params()
                 for j in range(p.size)]
        for t in rng.choice(len(picks), size=min(n_params, len(picks)), replace=False):
            i, name, j = picks[t]
            p = models[i].param(name).reshape(-1)
            old = p[j]
            p[j] = old + eps
            up = reference_loss(models, x, y, lam)
            p[j] = old - eps
            down = reference_loss(models, x, y, lam)
            p[j] = old
            # the perturbed float64 values are exact, so divide by their true spacing
            numeric = float((up - down) / (LD(old + eps) - LD(old - eps)))
            analytic = float(models[i].grads[name].reshape(-1)[j])
            denom = max(abs(numeric), abs(analytic), 1e-300)
            worst = max(worst, abs(numeric - analytic) / denom)
    return worst
