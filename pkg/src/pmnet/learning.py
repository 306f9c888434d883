"""Learned next-visit prediction to cut per-decision solver work.

The full receding-horizon policy solves one continuous subproblem per
candidate neighbor and keeps the best.  The discrete part of that decision
(which neighbor wins) turns out to be a stable function of the local
covariance vector, so each agent fits a small classifier per (target,
decision kind) pair: inputs are the covariances of the closed neighborhood
(self first, then ascending ids), outputs a softmax over the graph neighbors.
One hidden layer of 10 tanh units, cross-entropy loss with an L2 penalty
lambda/(2L) ||Theta||^2, full-batch gradient descent with a backtracking line
search.  Features are z-scored with statistics from the training set.

RhcLController collects the first L full solves per key, trains once, and
afterwards runs one prediction plus a single continuous solve per decision.
RhcAlController additionally computes the mismatch error e = 1 - max h; when
e exceeds its threshold the agent falls back to the full solve, keeps the
result as a new training sample, and retrains every few additions (FIFO cap
of 4L samples).  A prediction pointing at a currently covered target also
falls back to the full solve but is never added to the dataset, since the
solve's outcome was constrained by coverage rather than preference.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.random import default_rng

from .controllers import RhcController

HIDDEN = 10
LAMBDA_REG = 1e-3
MAX_EPOCHS = 2000
_ARMIJO = 1e-4
_STEP_MAX = 1e4
_STEP_MIN = 1e-12
_CLIP = 1e-12

_KIND_INDEX = {"arrival": 1, "dwell_end": 2}


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params, xs: np.ndarray):
    """Hidden activations and softmax outputs for standardized inputs."""
    w1, b1, w2, b2 = params
    h1 = np.tanh(xs @ w1 + b1)
    return h1, _softmax(h1 @ w2 + b2)


def loss_value(params, xs: np.ndarray, y: np.ndarray, lam: float) -> float:
    _, h = forward(params, xs)
    hc = np.clip(h, _CLIP, 1.0 - _CLIP)
    n = xs.shape[0]
    ce = -(y * np.log(hc) + (1.0 - y) * np.log(1.0 - hc)).sum() / n
    reg = 0.5 * lam / n * sum(float((p * p).sum()) for p in params)
    return ce + reg


def loss_and_grads(params, xs: np.ndarray, y: np.ndarray, lam: float):
    """Cross-entropy-plus-L2 loss and its gradient for every parameter."""
    w1, b1, w2, b2 = params
    n = xs.shape[0]
    h1, h = forward(params, xs)
    hc = np.clip(h, _CLIP, 1.0 - _CLIP)
    ce = -(y * np.log(hc) + (1.0 - y) * np.log(1.0 - hc)).sum() / n
    reg = 0.5 * lam / n * sum(float((p * p).sum()) for p in params)

    g_h = (-y / hc + (1.0 - y) / (1.0 - hc)) / n
    # softmax jacobian-vector product, rowwise
    dz2 = h * (g_h - (h * g_h).sum(axis=1, keepdims=True))
    dw2 = h1.T @ dz2 + lam / n * w2
    db2 = dz2.sum(axis=0) + lam / n * b2
    dh1 = dz2 @ w2.T
    dz1 = (1.0 - h1 * h1) * dh1
    dw1 = xs.T @ dz1 + lam / n * w1
    db1 = dz1.sum(axis=0) + lam / n * b1
    return ce + reg, (dw1, db1, dw2, db2)


@dataclass(frozen=True)
class ClassifierModel:
    """Trained next-visit predictor for one (agent, target, kind) key."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    feature_ids: tuple[int, ...]
    class_ids: tuple[int, ...]

    def posteriors(self, x: np.ndarray) -> np.ndarray:
        xs = (np.asarray(x, dtype=float) - self.mu) / self.sigma
        if xs.shape[-1] != self.mu.shape[0]:
            raise ValueError(
                f"feature dimension {xs.shape[-1]} != model {self.mu.shape[0]}")
        _, h = forward((self.w1, self.b1, self.w2, self.b2), xs[None, :])
        return h[0]

    def predict(self, x: np.ndarray) -> tuple[int, float]:
        """Most likely next target and the mismatch error 1 - max posterior.

        Ties go to the lowest class id (class_ids are ascending and argmax
        returns the first maximum).
        """
        h = self.posteriors(x)
        k = int(np.argmax(h))
        return self.class_ids[k], 1.0 - float(h[k])


def train_classifier(features: np.ndarray, labels, classes, rng,
                     lam: float = LAMBDA_REG,
                     max_epochs: int = MAX_EPOCHS,
                     feature_ids: tuple[int, ...] = ()) -> ClassifierModel:
    """Fit the classifier by full-batch descent; deterministic given rng."""
    x = np.asarray(features, dtype=float)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    xs = (x - mu) / sd
    cls = [int(c) for c in classes]
    y = np.zeros((len(labels), len(cls)))
    for row, lab in enumerate(labels):
        y[row, cls.index(int(lab))] = 1.0

    d, c = xs.shape[1], len(cls)
    params = (rng.uniform(-0.1, 0.1, (d, HIDDEN)),
              rng.uniform(-0.1, 0.1, HIDDEN),
              rng.uniform(-0.1, 0.1, (HIDDEN, c)),
              rng.uniform(-0.1, 0.1, c))
    loss, grads = loss_and_grads(params, xs, y, lam)
    step = 0.5
    for _ in range(max_epochs):
        gnorm2 = sum(float((g * g).sum()) for g in grads)
        if math.sqrt(gnorm2) <= 1e-6 * (1.0 + abs(loss)):
            break
        s = min(2.0 * step, _STEP_MAX)
        accepted = False
        while s > _STEP_MIN:
            trial = tuple(p - s * g for p, g in zip(params, grads))
            tl = loss_value(trial, xs, y, lam)
            if tl <= loss - _ARMIJO * s * gnorm2:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            break
        params, step = trial, s
        loss, grads = loss_and_grads(params, xs, y, lam)
        if not math.isfinite(loss):
            raise RuntimeError("classifier training reached a non-finite loss")
    w1, b1, w2, b2 = params
    return ClassifierModel(w1=w1, b1=b1, w2=w2, b2=b2, mu=mu, sigma=sd,
                           feature_ids=tuple(int(i) for i in feature_ids),
                           class_ids=tuple(cls))


# -- model persistence -------------------------------------------------------


def model_to_dict(m: ClassifierModel) -> dict:
    return {"w1": m.w1.tolist(), "b1": m.b1.tolist(),
            "w2": m.w2.tolist(), "b2": m.b2.tolist(),
            "mu": m.mu.tolist(), "sigma": m.sigma.tolist(),
            "feature_ids": list(m.feature_ids),
            "class_ids": list(m.class_ids)}


def model_from_dict(d: dict) -> ClassifierModel:
    return ClassifierModel(
        w1=np.array(d["w1"]), b1=np.array(d["b1"]),
        w2=np.array(d["w2"]), b2=np.array(d["b2"]),
        mu=np.array(d["mu"]), sigma=np.array(d["sigma"]),
        feature_ids=tuple(d["feature_ids"]), class_ids=tuple(d["class_ids"]))


def save_models(models: dict, path) -> None:
    """Write every trained model keyed by agent:target:kind to JSON."""
    doc = {f"{aid}:{tid}:{kind}": model_to_dict(m)
           for (aid, tid, kind), m in sorted(models.items())}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_models(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    out = {}
    for key, d in doc.items():
        aid, tid, kind = key.split(":")
        out[(int(aid), int(tid), kind)] = model_from_dict(d)
    return out


# -- controllers -------------------------------------------------------------


class RhcLController(RhcController):
    """Receding-horizon policy that learns its discrete choice.

    Collects the first dataset_size full solves per (target, kind), trains
    once per key, then answers with one prediction and one continuous solve.
    """

    name = "rhc-l"

    def __init__(self, config, dataset_size: int = 25):
        self.config = config
        self.dataset_size = dataset_size
        self.datasets: dict[tuple, tuple[list, list]] = {}
        self.models: dict[tuple, ClassifierModel] = {}
        self.training_times: list[tuple[float, tuple]] = []
        self.fallbacks: list[tuple[float, int, int, str]] = []

    # -- data plumbing -----------------------------------------------------

    def _features(self, sim, i: int):
        ids = sim.graph.neighbors(i, include_self=True)
        return ids, np.array([sim.omega[k] for k in ids])

    def _collecting(self, key) -> bool:
        return key not in self.models

    def _record_full_solve(self, sim, agent, kind, ls, j_star) -> None:
        key = (agent.id, ls.target, kind)
        if not self._collecting(key):
            return
        feats, labels = self.datasets.setdefault(key, ([], []))
        _, x = self._features(sim, ls.target)
        feats.append(x)
        labels.append(j_star)
        if len(feats) >= self.dataset_size:
            self._train_key(sim, key)

    def _train_key(self, sim, key) -> None:
        aid, tid, kind = key
        feats, labels = self.datasets[key]
        ids = sim.graph.neighbors(tid, include_self=True)
        rng = default_rng([sim.config.seed, aid, tid, _KIND_INDEX[kind]])
        self.models[key] = train_classifier(
            np.array(feats), labels, sim.graph.neighbors(tid), rng,
            feature_ids=ids)
        self.training_times.append((sim.t, key))

    # -- decision path -----------------------------------------------------

    def _accept_prediction(self, sim, agent, key, mismatch: float) -> bool:
        return True

    def _learned_decision(self, sim, agent, kind: str) -> bool:
        """Predict-then-solve shortcut; False sends the caller to the full path."""
        key = (agent.id, agent.target, kind)
        model = self.models.get(key)
        if model is None:
            return False
        ls = sim.local_state(agent.target)
        budget_total = sim.horizon_budget()
        cands = [j for j in ls.candidates()
                 if sim.graph.rho(agent.target, j) <= budget_total]
        if not cands:
            return False
        _, x = self._features(sim, agent.target)
        j_hat, mismatch = model.predict(x)
        if not self._accept_prediction(sim, agent, key, mismatch):
            return False
        if j_hat not in cands:
            # predicted target is covered (or out of reach); the constrained
            # full solve handles it and its outcome is not kept as data
            self.fallbacks.append((sim.t, agent.id, agent.target, kind))
            return False
        if kind == "arrival":
            res = self._solve_arrival(sim, ls, j_hat, budget_total)
            agent.planned_next = j_hat
            agent.planned_u = res.u_j
            sim.commit_dwell(agent, res.u_i, solver_calls=1)
        else:
            res = self._solve_dwell_end(sim, ls, j_hat, budget_total)
            sim.depart(agent, j_hat, planned_u=res.u_j, solver_calls=1)
        return True

    def _dwell_decision(self, sim, agent) -> None:
        if not self._learned_decision(sim, agent, "arrival"):
            super()._dwell_decision(sim, agent)

    def _depart_decision(self, sim, agent) -> None:
        if not self._learned_decision(sim, agent, "dwell_end"):
            super()._depart_decision(sim, agent)


class RhcAlController(RhcLController):
    """RHC-L plus a mismatch gate that keeps learning after deployment.

    A prediction with mismatch error above the threshold is rejected: the
    agent runs the full solve, stores it as a fresh sample, and retrains that
    key after every retrain_every additions (dataset capped at 4x its size,
    oldest first out).
    """

    name = "rhc-al"

    def __init__(self, config, dataset_size: int = 25,
                 threshold: float = 0.25, retrain_every: int = 5):
        super().__init__(config, dataset_size)
        self.threshold = threshold
        self.retrain_every = retrain_every
        self._pending_append: tuple | None = None
        self._appends: dict[tuple, int] = {}
        self.gate_rejections: list[tuple[float, int, int, str]] = []

    def _accept_prediction(self, sim, agent, key, mismatch: float) -> bool:
        if mismatch > self.threshold:
            self.gate_rejections.append(
                (sim.t, agent.id, agent.target, key[2]))
            self._pending_append = key
            return False
        return True

    def _learned_decision(self, sim, agent, kind: str) -> bool:
        self._pending_append = None
        return super()._learned_decision(sim, agent, kind)

    def _record_full_solve(self, sim, agent, kind, ls, j_star) -> None:
        key = (agent.id, ls.target, kind)
        if self._collecting(key):
            super()._record_full_solve(sim, agent, kind, ls, j_star)
            return
        if self._pending_append != key:
            return  # covered-target fallback: constrained choice, not kept
        self._pending_append = None
        feats, labels = self.datasets[key]
        _, x = self._features(sim, ls.target)
        feats.append(x)
        labels.append(j_star)
        cap = 4 * self.dataset_size
        while len(feats) > cap:
            feats.pop(0)
            labels.pop(0)
        self._appends[key] = self._appends.get(key, 0) + 1
        if self._appends[key] >= self.retrain_every:
            self._appends[key] = 0
            self._train_key(sim, key)
