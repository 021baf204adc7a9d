"""Continual-learning orchestration: the dual-network method and its baselines.

One run walks the task stream once. Per step the unsupervised reference
trains on the raw unlabeled pool, prototypes segregate that pool, and the
supervised learner trains on the labeled-plus-segregated data with the
combined objective (supervised contrastive, past-self distillation,
reference distillation). After the last step a linear classifier is fitted
on the final labeled data and evaluated class-incrementally.

Determinism: every stochastic role draws from its own seeded Generator, so
disabling a component (a loss term, the confident set) leaves the remaining
streams untouched. Two runs with the same config and seed are bitwise equal.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import scenario as sc
from . import segregate as sg
from .nets import EncoderProjector, LinearClassifier
from .numcore import Adam, CosineSchedule, Tape, backprop, gather2d, row_log_softmax, scale, total_sum

log = logging.getLogger(__name__)

METHODS = ("ursl", "co2l", "co2l_j", "co2l_p")
SEG_VARIANTS = ("v1", "v2", "v3", "v4")

_ROLE_REF_INIT = 1
_ROLE_LEARNER_INIT = 2
_ROLE_CLS_INIT = 3
_ROLE_REF_TRAIN = 4
_ROLE_LEARNER_TRAIN = 5
_ROLE_PROTO = 6
_ROLE_MEMORY = 7
_ROLE_CLS_TRAIN = 8


def role_rng(seed, role):
    """Independent stream per stochastic role; disabling one component never
    shifts another's draws."""
    return np.random.default_rng([int(seed), int(role)])


@dataclass(frozen=True)
class NetArch:
    """Encoder/projector widths shared by reference and learner."""

    hidden: tuple = (64, 64)
    proj_hidden: int = 32
    embed_dim: int = 16


@dataclass(frozen=True)
class MethodConfig:
    """Everything that defines a method run apart from the scenario.

    method picks the training recipe; the use_* flags carve loss terms out of
    the full objective; seg_variant remaps which pools feed the supervised
    batch (with its distillation of the past learner) and the reference
    distillation batch:
        v1 = (T+M;   T+M+U)     v2 = (T+M;   T+M+U_hat)
        v3 = (T+M+T_hat; T+M+U) v4 = (T+M+T_hat; T+M+U_hat)
    pretrain_reference trains the reference once on all pools up front and
    freezes it. Epoch defaults are desk scale; full-scale values are
    epochs_first=400, epochs_later=100, epochs_learner=200, batch 512.
    """

    method: str = "ursl"
    seg_variant: str = "v4"
    use_sup: bool = True
    use_td: bool = True
    use_kd: bool = True
    pretrain_reference: bool = False
    pseudo_anchor: bool = False
    pseudo_positive: bool = True
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    eta_id: float = -4.0
    eta_pl: float = -2.0
    spread_mode: str = "variance"
    n_aug: int = 2
    memory_size: int = 48
    memory_policy: str = "random"
    epochs_first: int = 100
    epochs_later: int = 25
    epochs_learner: int = 50
    batch_size: int = 128
    lr: float = 0.01
    min_lr: float = 1e-4
    classifier_epochs: int = 100
    classifier_lr: float = 1e-3
    classifier_batch: int = 128

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.seg_variant not in SEG_VARIANTS:
            raise ValueError(f"seg_variant must be one of {SEG_VARIANTS}")
        if self.spread_mode not in sg.SPREAD_MODES:
            raise ValueError(f"spread_mode must be one of {sg.SPREAD_MODES}")
        if self.memory_policy not in sc.MEMORY_POLICIES:
            raise ValueError(f"memory_policy must be one of {sc.MEMORY_POLICIES}")
        if self.method != "ursl":
            # only the full method has a live reference to distill from
            object.__setattr__(self, "use_kd", False)
            if self.pretrain_reference:
                raise ValueError("pretrain_reference applies to ursl only")
            if self.memory_policy != "random":
                raise ValueError(
                    "confidence-ranked memory needs the reference; use random")
        if not (self.use_sup or self.use_td or self.use_kd
                or self.method == "co2l_j"):
            raise ValueError("at least one loss term must be enabled")
        for name in ("epochs_first", "epochs_later", "epochs_learner",
                     "classifier_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.classifier_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.n_aug < 1:
            raise ValueError("n_aug must be >= 1")
        if self.memory_size < 0:
            raise ValueError("memory_size must be >= 0")

    @property
    def uses_reference(self):
        return self.method in ("ursl", "co2l_p")

    @property
    def uses_segregation(self):
        return self.method == "ursl"


@dataclass
class RunState:
    """Mutable state carried across task steps."""

    reference: EncoderProjector | None
    learner: EncoderProjector
    snapshot: object | None
    memory: sc.MemoryBuffer
    t: int
    rngs: dict


@dataclass
class RunReport:
    """Everything one run reports.

    metrics_dict() holds only deterministic values (the rerun contract);
    wall_clock stays separate.
    """

    method: str
    seg_variant: str
    seed: int
    n_tasks: int
    task_class_sets: list
    per_task_accuracy: list
    final_accuracy: float
    task_metrics: list
    loss_curves: dict
    memory_counts: list
    wall_clock: dict

    def metrics_dict(self):
        return {
            "method": self.method,
            "seg_variant": self.seg_variant,
            "seed": self.seed,
            "n_tasks": self.n_tasks,
            "task_classes": [list(c) for c in self.task_class_sets],
            "per_task_accuracy": [float(a) for a in self.per_task_accuracy],
            "final_accuracy": float(self.final_accuracy),
            "task_metrics": self.task_metrics,
            "loss_curves": self.loss_curves,
            "memory_counts": self.memory_counts,
        }


class _PhaseClock:
    """Accumulates wall-clock seconds per named phase."""

    def __init__(self):
        self.totals = {}

    def add(self, name, seconds):
        self.totals[name] = self.totals.get(name, 0.0) + seconds


def _timed(clock, name):
    class _Ctx:
        def __enter__(self):
            self.start = time.perf_counter()
            return self

        def __exit__(self, *exc):
            clock.add(name, time.perf_counter() - self.start)
            return False

    return _Ctx()


# ---------------------------------------------------------------------------
# Phase trainers
# ---------------------------------------------------------------------------


def train_reference(net, pool_x, epochs, cfg, augmenter, rng):
    """Contrastive training of the reference on the raw unlabeled pool.

    A fresh Adam and cosine schedule per call (each step re-anneals).
    Returns per-epoch mean losses; epochs=0 leaves the net untouched.
    """
    if len(pool_x) == 0:
        raise ValueError("reference training needs a non-empty unlabeled pool")
    if epochs == 0:
        return []
    opt = Adam(net.params, lr=cfg.lr)
    schedule = CosineSchedule(cfg.lr, cfg.min_lr, epochs)
    curve = []
    for epoch in range(epochs):
        opt.lr = schedule.at(epoch)
        epoch_losses = []
        for idx in sc.epoch_batches(len(pool_x), cfg.batch_size, rng):
            views = augmenter.pair_views(pool_x[idx], rng)
            with Tape() as tape:
                z = net.embed(views)
                loss = L.ntxent_loss(z, cfg.weights.tau)
                grads = backprop(tape, loss)
            opt.step(grads)
            epoch_losses.append(float(loss.data))
        curve.append(float(np.mean(epoch_losses)))
    return curve


def train_learner_task(learner, sup_x, sup_y, sup_pseudo, task_classes, t, cfg,
                       augmenter, rng, td_teacher=None, kd_teacher=None,
                       kd_pool=None, unsup_pool=None):
    """One task's learner training under the combined objective.

    Args:
        sup_x, sup_y, sup_pseudo: the supervised union (labeled + memory +
            confident pseudo-labeled set under v3/v4), per-source.
        task_classes: current-task class ids (the anchor set of the
            supervised loss).
        td_teacher: frozen snapshot of the learner from the previous step,
            or None when t == 1 or distillation of the past is disabled.
        kd_teacher / kd_pool: the reference teacher and the pool its batches
            come from, or None when reference distillation is disabled.
        unsup_pool: raw pool for the joint unsupervised term, or None.

    Per optimizer step: supervised batch (also the past-distillation batch),
    then an independently drawn reference-distillation batch, then an
    independently drawn unsupervised batch; disabled terms draw nothing.
    Returns per-epoch mean losses.
    """
    if len(sup_x) == 0:
        raise ValueError("empty supervised union")
    if (kd_teacher is None) != (kd_pool is None):
        raise ValueError("kd_teacher and kd_pool must be supplied together")
    if kd_pool is not None and len(kd_pool) == 0:
        raise ValueError("empty reference-distillation pool")
    if cfg.epochs_learner == 0:
        return []
    current = frozenset(int(c) for c in task_classes)
    opt = Adam(learner.params, lr=cfg.lr)
    schedule = CosineSchedule(cfg.lr, cfg.min_lr, cfg.epochs_learner)
    curve = []
    for epoch in range(cfg.epochs_learner):
        opt.lr = schedule.at(epoch)
        epoch_losses = []
        for idx in sc.epoch_batches(len(sup_x), cfg.batch_size, rng):
            views = augmenter.pair_views(sup_x[idx], rng)
            with Tape() as tape:
                z = learner.embed(views)
                l_sup = None
                if cfg.use_sup:
                    l_sup = L.asym_supcon_loss(
                        z, sup_y[idx], current, cfg.weights.tau,
                        pseudo_flags=sup_pseudo[idx],
                        pseudo_anchor=cfg.pseudo_anchor,
                        pseudo_positive=cfg.pseudo_positive)
                l_td = None
                if td_teacher is not None:
                    l_td = L.distillation_loss(
                        td_teacher.embed(views), z,
                        cfg.weights.tau_teacher, cfg.weights.tau_student)
                l_kd = None
                if kd_teacher is not None:
                    kidx = sc.sample_batch(len(kd_pool), cfg.batch_size, rng)
                    kviews = augmenter.pair_views(kd_pool[kidx], rng)
                    zk = learner.embed(kviews)
                    l_kd = L.distillation_loss(
                        kd_teacher.embed(kviews), zk,
                        cfg.weights.tau_teacher, cfg.weights.tau_student)
                total = L.combined_loss(l_sup, l_td, l_kd, cfg.weights, t)
                if unsup_pool is not None:
                    uidx = sc.sample_batch(len(unsup_pool), cfg.batch_size, rng)
                    uviews = augmenter.pair_views(unsup_pool[uidx], rng)
                    zu = learner.embed(uviews)
                    total = L.add(total, L.ntxent_loss(zu, cfg.weights.tau))
                grads = backprop(tape, total)
            opt.step(grads)
            epoch_losses.append(float(total.data))
        curve.append(float(np.mean(epoch_losses)))
    return curve


def fit_classifier(learner, xs, ys, observed_classes, cfg, rng_init, rng_train):
    """Linear head on frozen encoder features, class-weighted sampling.

    Mini-batches are drawn with replacement with per-sample probability
    inversely proportional to class frequency. Raises if any observed class
    is missing from the training data.
    """
    observed = sorted(int(c) for c in observed_classes)
    present = set(int(c) for c in np.unique(ys))
    missing = [c for c in observed if c not in present]
    if missing:
        raise ValueError(f"classes missing from classifier data: {missing}")
    class_index = {c: i for i, c in enumerate(observed)}
    targets = np.array([class_index[int(c)] for c in ys], dtype=np.int64)
    features = learner.encoder_features(np.asarray(xs)).data

    counts = np.bincount(targets, minlength=len(observed))
    weights = 1.0 / counts[targets]
    probs = weights / weights.sum()

    head = LinearClassifier(features.shape[1], len(observed), rng_init,
                            dtype=features.dtype)
    opt = Adam(head.params, lr=cfg.classifier_lr)
    n = len(targets)
    for _ in range(cfg.classifier_epochs):
        order = rng_train.choice(n, size=n, replace=True, p=probs)
        for start in range(0, n, cfg.classifier_batch):
            batch = order[start:start + cfg.classifier_batch]
            with Tape() as tape:
                logits = head.classify(features[batch])
                logp = row_log_softmax(logits)
                picked = gather2d(logp, np.arange(len(batch)), targets[batch])
                loss = scale(total_sum(picked), -1.0 / len(batch))
                grads = backprop(tape, loss)
            opt.step(grads)
    return head, np.asarray(observed, dtype=np.int64)


def evaluate(head, learner, class_ids, test_x, test_y, task_class_sets):
    """Class-incremental top-1 accuracy, overall and per task.

    Only test samples of observed classes are scored; no task identity is
    given at test time (a single head over all observed classes).
    """
    test_x = np.asarray(test_x)
    test_y = np.asarray(test_y)
    keep = np.isin(test_y, class_ids)
    test_x, test_y = test_x[keep], test_y[keep]
    if len(test_y) == 0:
        raise ValueError("no test samples for the observed classes")
    logits = head.classify(learner.encoder_features(test_x).data).data
    pred = class_ids[logits.argmax(axis=1)]
    correct = pred == test_y
    final = float(correct.mean())
    per_task = []
    for classes in task_class_sets:
        mask = np.isin(test_y, list(classes))
        per_task.append(float(correct[mask].mean()) if mask.any() else 0.0)
    return final, per_task


# ---------------------------------------------------------------------------
# Full run
# ---------------------------------------------------------------------------


def _labeled_union(step, memory):
    """Current labeled set plus memory exemplars: (xs, ys, n_current)."""
    mem_x, mem_y = memory.items()
    if len(mem_y):
        xs = np.concatenate([step.labeled_x, mem_x])
        ys = np.concatenate([step.labeled_y, mem_y])
    else:
        xs, ys = step.labeled_x, step.labeled_y
    return xs, ys, len(step.labeled_y)


def _segregation_pass(state, step, cfg, augmenter, observed):
    """Prototypes, thresholds, pool split, and quality metrics for one step."""
    lab_x, lab_y, n_cur = _labeled_union(step, state.memory)
    protos = sg.build_prototypes(state.reference, lab_x, lab_y, observed,
                                 augmenter, state.rngs["proto"], n_aug=cfg.n_aug)
    labeled_scores, _ = sg.score(protos, lab_x, reference=state.reference)
    stats = sg.compute_thresholds(labeled_scores, cfg.eta_id, cfg.eta_pl,
                                  spread_mode=cfg.spread_mode)
    pool_scores, nearest = sg.score(protos, step.unlabeled_x,
                                    reference=state.reference)
    out = sg.segregate_scores(pool_scores, nearest, stats)
    quality = sg.ood_metrics(out, pool_scores, step.provenance)
    return {
        "output": out,
        "stats": stats,
        "pool_scores": pool_scores,
        "nearest": nearest,
        "labeled_scores": labeled_scores,
        "n_current_labeled": n_cur,
        "quality": quality,
    }


def _metrics_row(t, step, seg):
    out, stats, q = seg["output"], seg["stats"], seg["quality"]
    return {
        "task": t,
        "n_unlabeled": int(len(step.unlabeled_x)),
        "n_u_hat": int(out.u_hat_indices.size),
        "n_t_hat": int(out.t_hat_indices.size),
        "tau_id": float(stats.tau_id),
        "tau_pl": float(stats.tau_pl),
        "score_mean": float(stats.mean),
        "score_spread": float(stats.spread),
        "auroc": float(q.auroc),
        "precision": float(q.precision),
        "pseudo_accuracy": float(q.pseudo_accuracy),
    }


def _memory_confidence(cfg, seg, n_current):
    """Confidence of the step's labeled samples for ranked memory policies."""
    if cfg.memory_policy == "random":
        return None
    if seg is None:
        raise ValueError("confidence-ranked memory needs segregation scores")
    return seg["labeled_scores"][:n_current]


def run_continual(cfg, stream, dataset, augmenter, seed, arch=NetArch()):
    """Walk the stream once under one method config; returns a RunReport.

    The test split of `dataset` provides the class-incremental evaluation
    set. Stochastic phases draw from role-separated streams derived from
    `seed`.
    """
    if not stream.steps:
        raise ValueError("stream is empty")
    clock = _PhaseClock()
    start_total = time.perf_counter()
    dim = stream.steps[0].labeled_x.shape[1]

    reference = None
    if cfg.uses_reference:
        reference = EncoderProjector(dim, arch.hidden, arch.proj_hidden,
                                     arch.embed_dim,
                                     rng=role_rng(seed, _ROLE_REF_INIT))
    learner = EncoderProjector(dim, arch.hidden, arch.proj_hidden,
                               arch.embed_dim,
                               rng=role_rng(seed, _ROLE_LEARNER_INIT))
    state = RunState(
        reference=reference,
        learner=learner,
        snapshot=None,
        memory=sc.MemoryBuffer(cfg.memory_size, cfg.memory_policy),
        t=0,
        rngs={
            "ref": role_rng(seed, _ROLE_REF_TRAIN),
            "learner": role_rng(seed, _ROLE_LEARNER_TRAIN),
            "proto": role_rng(seed, _ROLE_PROTO),
            "memory": role_rng(seed, _ROLE_MEMORY),
        },
    )

    if cfg.pretrain_reference:
        pooled = np.concatenate([s.unlabeled_x for s in stream.steps])
        with _timed(clock, "reference"):
            train_reference(state.reference, pooled, cfg.epochs_first, cfg,
                            augmenter, state.rngs["ref"])

    task_metrics = []
    loss_curves = {"reference": {}, "learner": {}}
    memory_counts = []
    observed = []

    for step in stream.steps:
        t = step.index
        state.t = t
        observed.extend(step.task_classes)
        state.snapshot = state.learner.snapshot()

        trains_reference = ((cfg.method == "ursl" and not cfg.pretrain_reference)
                            or (cfg.method == "co2l_p" and t == 1))
        if trains_reference:
            epochs = cfg.epochs_first if t == 1 else cfg.epochs_later
            with _timed(clock, "reference"):
                curve = train_reference(state.reference, step.unlabeled_x,
                                        epochs, cfg, augmenter,
                                        state.rngs["ref"])
            loss_curves["reference"][f"t{t}"] = curve
        if cfg.method == "co2l_p" and t == 1:
            state.learner.copy_params_from(state.reference)

        seg = None
        if cfg.uses_segregation:
            with _timed(clock, "segregation"):
                seg = _segregation_pass(state, step, cfg, augmenter, observed)
            task_metrics.append(_metrics_row(t, step, seg))
            log.debug("t=%d |U_hat|=%d |T_hat|=%d auroc=%.3f", t,
                      task_metrics[-1]["n_u_hat"], task_metrics[-1]["n_t_hat"],
                      task_metrics[-1]["auroc"])

        sup_x, sup_y, n_cur = _labeled_union(step, state.memory)
        sup_pseudo = np.zeros(len(sup_y), dtype=bool)
        if cfg.uses_segregation and cfg.seg_variant in ("v3", "v4"):
            out = seg["output"]
            if out.t_hat_indices.size:
                sup_x = np.concatenate([sup_x, step.unlabeled_x[out.t_hat_indices]])
                sup_y = np.concatenate([sup_y, out.t_hat_labels])
                sup_pseudo = np.concatenate(
                    [sup_pseudo, np.ones(out.t_hat_indices.size, dtype=bool)])

        kd_teacher = kd_pool = None
        if cfg.use_kd and cfg.method == "ursl":
            lab_x, _, _ = _labeled_union(step, state.memory)
            if cfg.seg_variant in ("v1", "v3"):
                pool_part = step.unlabeled_x
            else:
                pool_part = step.unlabeled_x[seg["output"].u_hat_indices]
            kd_pool = np.concatenate([lab_x, pool_part])
            kd_teacher = state.reference

        td_teacher = state.snapshot if (cfg.use_td and t > 1) else None
        unsup_pool = step.unlabeled_x if cfg.method == "co2l_j" else None

        with _timed(clock, "learner"):
            curve = train_learner_task(
                state.learner, sup_x, sup_y, sup_pseudo, step.task_classes, t,
                cfg, augmenter, state.rngs["learner"],
                td_teacher=td_teacher, kd_teacher=kd_teacher,
                kd_pool=kd_pool, unsup_pool=unsup_pool)
        loss_curves["learner"][f"t{t}"] = curve

        with _timed(clock, "memory"):
            conf = _memory_confidence(cfg, seg, n_cur)
            state.memory.update(step.labeled_x, step.labeled_y,
                                state.rngs["memory"], confidence=conf)
        memory_counts.append({str(k): int(v)
                              for k, v in state.memory.class_counts().items()})

    final_x, final_y, _ = _labeled_union(stream.steps[-1], state.memory)
    with _timed(clock, "classifier"):
        head, class_ids = fit_classifier(
            state.learner, final_x, final_y, observed, cfg,
            role_rng(seed, _ROLE_CLS_INIT), role_rng(seed, _ROLE_CLS_TRAIN))
    with _timed(clock, "evaluate"):
        final_acc, per_task = evaluate(head, state.learner, class_ids,
                                       dataset.test_x, dataset.test_y,
                                       stream.task_classes)
    clock.add("total", time.perf_counter() - start_total)

    report = RunReport(
        method=cfg.method,
        seg_variant=cfg.seg_variant,
        seed=int(seed),
        n_tasks=len(stream.steps),
        task_class_sets=[list(c) for c in stream.task_classes],
        per_task_accuracy=per_task,
        final_accuracy=final_acc,
        task_metrics=task_metrics,
        loss_curves=loss_curves,
        memory_counts=memory_counts,
        wall_clock={k: float(v) for k, v in clock.totals.items()},
    )
    report._state = state  # exposed for tests and checkpointing
    return report


def run_segregation_eval(cfg, stream, augmenter, seed, arch=NetArch()):
    """Reference-and-segregation-only walk: trains no learner.

    Returns (per-task metric rows, per-sample score rows) for offline
    analysis of the pool split quality.
    """
    if not stream.steps:
        raise ValueError("stream is empty")
    dim = stream.steps[0].labeled_x.shape[1]
    reference = EncoderProjector(dim, arch.hidden, arch.proj_hidden,
                                 arch.embed_dim,
                                 rng=role_rng(seed, _ROLE_REF_INIT))
    state = RunState(
        reference=reference,
        learner=EncoderProjector(dim, arch.hidden, arch.proj_hidden,
                                 arch.embed_dim,
                                 rng=role_rng(seed, _ROLE_LEARNER_INIT)),
        snapshot=None,
        memory=sc.MemoryBuffer(cfg.memory_size, cfg.memory_policy),
        t=0,
        rngs={
            "ref": role_rng(seed, _ROLE_REF_TRAIN),
            "proto": role_rng(seed, _ROLE_PROTO),
            "memory": role_rng(seed, _ROLE_MEMORY),
        },
    )
    rows, samples = [], []
    observed = []
    for step in stream.steps:
        t = step.index
        observed.extend(step.task_classes)
        epochs = cfg.epochs_first if t == 1 else cfg.epochs_later
        train_reference(state.reference, step.unlabeled_x, epochs, cfg,
                        augmenter, state.rngs["ref"])
        seg = _segregation_pass(state, step, cfg, augmenter, observed)
        rows.append(_metrics_row(t, step, seg))
        related, true_classes = step.provenance.reveal()
        out = seg["output"]
        in_u = np.zeros(len(step.unlabeled_x), dtype=bool)
        in_u[out.u_hat_indices] = True
        in_t = np.zeros(len(step.unlabeled_x), dtype=bool)
        in_t[out.t_hat_indices] = True
        pseudo = np.full(len(step.unlabeled_x), -1, dtype=np.int64)
        pseudo[out.t_hat_indices] = out.t_hat_labels
        for i in range(len(step.unlabeled_x)):
            samples.append({
                "task": t,
                "index": i,
                "score": float(seg["pool_scores"][i]),
                "nearest_class": int(seg["nearest"][i]),
                "related": bool(related[i]),
                "true_class": int(true_classes[i]),
                "in_u_hat": bool(in_u[i]),
                "in_t_hat": bool(in_t[i]),
                "pseudo_label": int(pseudo[i]),
            })
        conf = _memory_confidence(cfg, seg, len(step.labeled_y))
        state.memory.update(step.labeled_x, step.labeled_y,
                            state.rngs["memory"], confidence=conf)
    return rows, samples
