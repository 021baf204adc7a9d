"""Finite-difference verification of every loss gradient.

Each named loss gets a batch of randomized configurations (shapes, labels,
temperatures, flag combinations). For each configuration the tape gradient
of the loss with respect to the raw (pre-normalization) embeddings is
compared against central differences in double precision. The suite is the
backing for the `gradcheck` CLI command and the acceptance gate.
"""

from __future__ import annotations

import numpy as np

from . import losses as L
from .numcore import Tensor, check_gradients, l2_normalize_rows

LOSS_NAMES = ("ntxent", "supcon", "distill_time", "distill_reference",
              "combined")
DEFAULT_TOL = 1e-4


def _raw_embeddings(rng, n_sources, dim):
    """Unnormalized float64 view embeddings; the closure normalizes them so
    the check covers the normalization backward as well."""
    return Tensor(rng.normal(0.0, 1.0, size=(2 * n_sources, dim)),
                  requires_grad=True)


def _unit_rows(rng, n_rows, dim):
    z = rng.normal(0.0, 1.0, size=(n_rows, dim))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _ntxent_case(rng):
    n = int(rng.integers(2, 7))
    dim = int(rng.integers(3, 9))
    tau = float(rng.uniform(0.05, 0.5))
    x = _raw_embeddings(rng, n, dim)
    return lambda: L.ntxent_loss(l2_normalize_rows(x), tau), [x]


def _supcon_case(rng):
    n = int(rng.integers(2, 7))
    dim = int(rng.integers(3, 9))
    tau = float(rng.uniform(0.05, 0.5))
    n_classes = int(rng.integers(2, 5))
    labels = rng.integers(0, n_classes, size=n)
    current = frozenset(int(c) for c in
                        rng.choice(n_classes, size=max(1, n_classes // 2),
                                   replace=False))
    pseudo = rng.random(n) < 0.3
    pseudo_anchor = bool(rng.integers(0, 2))
    pseudo_positive = bool(rng.integers(0, 2))
    x = _raw_embeddings(rng, n, dim)

    def fn():
        return L.asym_supcon_loss(
            l2_normalize_rows(x), labels, current, tau, pseudo_flags=pseudo,
            pseudo_anchor=pseudo_anchor, pseudo_positive=pseudo_positive)

    return fn, [x]


def _distill_case(rng, tau_teacher_range):
    n = int(rng.integers(2, 6))
    dim = int(rng.integers(3, 9))
    tau_t = float(rng.uniform(*tau_teacher_range))
    tau_s = float(rng.uniform(0.1, 0.5))
    teacher = _unit_rows(rng, 2 * n, dim)
    x = _raw_embeddings(rng, n, dim)
    return (lambda: L.distillation_loss(teacher, l2_normalize_rows(x),
                                        tau_t, tau_s)), [x]


def _combined_case(rng):
    n = int(rng.integers(2, 5))
    dim = int(rng.integers(3, 8))
    weights = L.LossWeights(
        tau=float(rng.uniform(0.05, 0.5)),
        tau_teacher=float(rng.uniform(0.02, 0.1)),
        tau_student=float(rng.uniform(0.1, 0.5)),
        td_weight=float(rng.uniform(0.05, 0.5)),
        kd_weight=float(rng.uniform(0.05, 0.5)))
    n_classes = 3
    labels = rng.integers(0, n_classes, size=n)
    current = frozenset(int(c) for c in labels[:max(1, n // 2)])
    td_teacher = _unit_rows(rng, 2 * n, dim)
    kd_teacher = _unit_rows(rng, 2 * n, dim)
    x_sup = _raw_embeddings(rng, n, dim)
    x_kd = _raw_embeddings(rng, n, dim)

    def fn():
        z = l2_normalize_rows(x_sup)
        l_sup = L.asym_supcon_loss(z, labels, current, weights.tau)
        l_td = L.distillation_loss(td_teacher, z, weights.tau_teacher,
                                   weights.tau_student)
        zk = l2_normalize_rows(x_kd)
        l_kd = L.distillation_loss(kd_teacher, zk, weights.tau_teacher,
                                   weights.tau_student)
        return L.combined_loss(l_sup, l_td, l_kd, weights, t=2)

    return fn, [x_sup, x_kd]


_CASES = {
    "ntxent": _ntxent_case,
    "supcon": _supcon_case,
    "distill_time": lambda rng: _distill_case(rng, (0.02, 0.1)),
    "distill_reference": lambda rng: _distill_case(rng, (0.02, 0.1)),
    "combined": _combined_case,
}


def run_suite(n_configs=20, seed=2024, tol=DEFAULT_TOL):
    """Gradcheck every loss on n_configs random setups each.

    Returns {loss_name: worst relative error}. A suite passes when every
    entry is strictly below tol.
    """
    if n_configs < 1:
        raise ValueError("n_configs must be >= 1")
    results = {}
    for name in LOSS_NAMES:
        worst = 0.0
        for i in range(n_configs):
            rng = np.random.default_rng([seed, LOSS_NAMES.index(name), i])
            fn, params = _CASES[name](rng)
            worst = max(worst, check_gradients(fn, params))
        results[name] = worst
    return results


def suite_passes(results, tol=DEFAULT_TOL):
    return all(err < tol for err in results.values())
