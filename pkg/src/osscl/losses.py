"""Contrastive and distillation losses over batches of paired views.

Conventions shared by every loss here:
  * A batch of N sources becomes 2N views, interleaved so views 2k and 2k+1
    come from source k. Adjacent pairing is assumed throughout.
  * Losses consume unit-norm embeddings (rows on the sphere); similarity is
    the dot product, i.e. cosine.
  * Self-similarity never takes part in a softmax: the diagonal is masked
    out of every row, and masked log-probabilities are neutralized with
    mask_fill before any multiply so no 0 * -inf can occur.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import (
    Tensor,
    add,
    gather2d,
    mask_fill,
    mul,
    pairwise_cosine,
    row_log_softmax,
    scale,
    total_sum,
)


class MissingLabelsError(ValueError):
    """A supervised loss was called without labels."""


@dataclass(frozen=True)
class LossWeights:
    """Temperatures and mixing weights of the combined objective.

    tau is the contrastive temperature, tau_teacher and tau_student the
    sharper/softer temperatures of the similarity distributions used for
    distillation, td_weight scales past-self distillation and kd_weight
    scales reference distillation.
    """

    tau: float = 0.1
    tau_teacher: float = 0.01
    tau_student: float = 0.2
    td_weight: float = 0.2
    kd_weight: float = 0.2

    def __post_init__(self):
        for name in ("tau", "tau_teacher", "tau_student"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("td_weight", "kd_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class ViewBatch:
    """2N augmented views plus per-source annotations.

    views holds the raw inputs (not embeddings) interleaved by source;
    labels and pseudo_flags are per-source (length N) and are expanded to
    per-view internally by the losses. labels may be None for unlabeled
    batches; pseudo_flags True marks sources whose label is a pseudo-label.
    """

    views: np.ndarray
    labels: np.ndarray | None = None
    pseudo_flags: np.ndarray | None = None
    current_classes: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.views.ndim != 2 or self.views.shape[0] % 2 != 0:
            raise ValueError("views must be [2N, D] with interleaved pairs")
        n = self.views.shape[0] // 2
        if self.labels is not None and len(self.labels) != n:
            raise ValueError(f"labels length {len(self.labels)} != n_sources {n}")
        if self.pseudo_flags is not None and len(self.pseudo_flags) != n:
            raise ValueError(f"pseudo_flags length {len(self.pseudo_flags)} != n_sources {n}")

    @property
    def n_sources(self):
        return self.views.shape[0] // 2


def _offdiag_mask(n):
    return ~np.eye(n, dtype=bool)


def _as_constant(emb):
    """Teacher embeddings enter losses as plain data, never as graph nodes."""
    if isinstance(emb, Tensor):
        return emb.data
    return np.asarray(emb)


def expand_per_view(values):
    """Repeat per-source annotations onto views: [a, b] -> [a, a, b, b]."""
    return np.repeat(np.asarray(values), 2, axis=0)


def ntxent_loss(embeddings, tau):
    """Normalized temperature-scaled cross entropy over 2N interleaved views.

    For each view the positive is its pair partner; the denominator runs over
    every other view. Mean over all 2N anchor terms. A single source (2 views)
    yields exactly 0 since the softmax has one candidate.

    Args:
        embeddings: Tensor [2N, d], unit rows, on the tape.
        tau: temperature > 0.
    """
    v = embeddings.shape[0]
    if v < 2 or v % 2 != 0:
        raise ValueError(f"need an even number >= 2 of views, got {v}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    sim = scale(pairwise_cosine(embeddings, embeddings), 1.0 / tau)
    logp = row_log_softmax(sim, _offdiag_mask(v))
    rows = np.arange(v)
    partner = rows ^ 1
    positives = gather2d(logp, rows, partner)
    return scale(total_sum(positives), -1.0 / v)


def asym_supcon_loss(embeddings, labels, current_classes, tau,
                     pseudo_flags=None, pseudo_anchor=False, pseudo_positive=True):
    """Supervised contrastive loss with anchors restricted to current-task views.

    Views whose label is in current_classes act as anchors; every same-label
    view (current or past) is a positive. The per-anchor term averages the
    log-probabilities of its positive set, and the total is normalized by the
    view count 2N regardless of how many views anchor. Pseudo-labeled views
    are positive-eligible by default but never anchor unless pseudo_anchor.

    Args:
        embeddings: Tensor [2N, d], unit rows, on the tape.
        labels: per-source integer labels, length N.
        current_classes: iterable of class ids of the current task.
        tau: temperature > 0.
        pseudo_flags: optional per-source bools, True = pseudo-labeled.
        pseudo_anchor: let pseudo-labeled views anchor.
        pseudo_positive: let pseudo-labeled views serve as positives.

    Returns a 0-d Tensor; exactly 0 when no view anchors or no anchor has a
    positive.
    """
    if labels is None:
        raise MissingLabelsError("asym_supcon_loss requires labels")
    if tau <= 0:
        raise ValueError("tau must be positive")
    v = embeddings.shape[0]
    labels = np.asarray(labels)
    if 2 * len(labels) != v:
        raise ValueError(f"labels length {len(labels)} != n_sources {v // 2}")
    view_labels = expand_per_view(labels)
    if pseudo_flags is None:
        view_pseudo = np.zeros(v, dtype=bool)
    else:
        view_pseudo = expand_per_view(np.asarray(pseudo_flags, dtype=bool))

    current = np.asarray(sorted(current_classes), dtype=view_labels.dtype)
    in_current = np.isin(view_labels, current)
    anchors = in_current.copy()
    if not pseudo_anchor:
        anchors &= ~view_pseudo

    same = view_labels[:, None] == view_labels[None, :]
    offdiag = _offdiag_mask(v)
    positives = same & offdiag
    if not pseudo_positive:
        positives &= ~view_pseudo[None, :]

    pos_counts = positives.sum(axis=1)
    weights = np.zeros((v, v))
    active = anchors & (pos_counts > 0)
    if active.any():
        weights[active] = positives[active] / pos_counts[active, None]
    weights /= v

    sim = scale(pairwise_cosine(embeddings, embeddings), 1.0 / tau)
    logp = mask_fill(row_log_softmax(sim, offdiag), offdiag, 0.0)
    weighted = mul(logp, Tensor(weights.astype(logp.dtype)))
    return scale(total_sum(weighted), -1.0)


@dataclass(frozen=True)
class SimilarityDistribution:
    """Per-view softmax over the other views' similarities, self excluded.

    probs is [2N, 2N] with an exact zero diagonal; each row sums to 1.
    """

    probs: np.ndarray

    def row(self, i):
        """Probability vector of view i over the other 2N-1 views."""
        n = self.probs.shape[0]
        return self.probs[i][np.arange(n) != i]


def similarity_distribution(embeddings, tau):
    """Softmax over pairwise cosines at temperature tau, diagonal excluded.

    Pure numpy, no tape involvement; both distillation teachers go through
    this path.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = _as_constant(embeddings)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("need at least two views")
    sim = (z @ z.T) / tau
    np.fill_diagonal(sim, -np.inf)
    sim -= sim.max(axis=1, keepdims=True)
    ex = np.exp(sim)
    probs = ex / ex.sum(axis=1, keepdims=True)
    return SimilarityDistribution(probs=probs)


def distillation_loss(teacher_embeddings, student_embeddings, tau_teacher, tau_student):
    """Cross entropy from a frozen teacher's similarity rows to the student's.

    L = sum_i sum_{j != i} -p_teacher[i, j] * log p_student[i, j], summed (not
    averaged) over the 2N anchor views. The teacher side is a constant; only
    the student embeddings receive gradient.

    Args:
        teacher_embeddings: [2N, d] unit rows, array or off-tape Tensor.
        student_embeddings: Tensor [2N, d], unit rows, on the tape.
        tau_teacher: teacher temperature (sharper, e.g. 0.01).
        tau_student: student temperature (softer, e.g. 0.2).
    """
    teacher = _as_constant(teacher_embeddings)
    v = student_embeddings.shape[0]
    if teacher.shape[0] != v:
        raise ValueError(f"teacher has {teacher.shape[0]} views, student has {v}")
    target = similarity_distribution(teacher, tau_teacher).probs
    offdiag = _offdiag_mask(v)
    sim = scale(pairwise_cosine(student_embeddings, student_embeddings), 1.0 / tau_student)
    logp = mask_fill(row_log_softmax(sim, offdiag), offdiag, 0.0)
    weighted = mul(logp, Tensor(target.astype(logp.dtype)))
    return scale(total_sum(weighted), -1.0)


def combined_loss(l_sup, l_td, l_kd, weights, t):
    """L_sup + td_weight * L_TD + kd_weight * L_KD with absent terms dropped.

    Args:
        l_sup, l_td, l_kd: 0-d Tensors or None for disabled terms.
        weights: LossWeights.
        t: 1-based time step; a TD term at t == 1 is rejected since there is
            no past learner to distill from.
    """
    if t < 1:
        raise ValueError("t is 1-based")
    if l_td is not None and t == 1:
        raise ValueError("time distillation needs a past learner, none exists at t=1")
    terms = []
    if l_sup is not None:
        terms.append(l_sup)
    if l_td is not None:
        terms.append(scale(l_td, weights.td_weight))
    if l_kd is not None:
        terms.append(scale(l_kd, weights.kd_weight))
    if not terms:
        raise ValueError("combined_loss needs at least one term")
    out = terms[0]
    for term in terms[1:]:
        out = add(out, term)
    return out
