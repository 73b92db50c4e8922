"""Randomized feature defense and the query-counted victim oracle.

The defense adds fresh Gaussian noise to configured activations at every
inference. An Oracle wraps a model with a DefensePolicy and exposes the two
black-box access levels (score and hard-label), counting every forward as one
query. Verification queries (the 9-run majority protocol) go through a
non-counting path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Array, Model, ShapeError, _check_width, loss, predicted_label

MODES = ("none", "input", "feature")


class OracleAccessError(RuntimeError):
    """An attack asked for information its threat model forbids."""


@dataclass(frozen=True)
class DefensePolicy:
    """Where and how noise delta ~ N(0, nu*I) is injected.

    Layer indices use cut positions: 0 is the input itself, i >= 1 is the
    output of layer i. Feature mode with layer_set (0,) is distributionally
    identical to input mode.
    """

    mode: str = "none"
    nu: float = 0.0
    layer_set: tuple[int, ...] = ()
    per_layer_nu: dict[int, float] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")
        object.__setattr__(self, "layer_set", tuple(int(i) for i in self.layer_set))
        if self.mode == "feature" and not self.layer_set:
            raise ValueError("feature mode needs a nonempty layer_set")
        if self.per_layer_nu is not None:
            bad = set(self.per_layer_nu) - set(self.layer_set)
            if bad:
                raise ValueError(f"per_layer_nu keys {sorted(bad)} not in layer_set")
            if any(v < 0 for v in self.per_layer_nu.values()):
                raise ValueError("per_layer_nu values must be nonnegative")

    def nu_at(self, layer: int) -> float:
        if self.per_layer_nu and layer in self.per_layer_nu:
            return float(self.per_layer_nu[layer])
        return float(self.nu)


@dataclass(frozen=True)
class VerificationConfig:
    """Appendix-style success check: majority vote over fresh runs."""

    runs: int = 9
    majority: int = 5

    def __post_init__(self):
        if self.runs < 1 or self.majority < 1:
            raise ValueError("runs and majority must be positive")
        if self.majority * 2 <= self.runs:
            raise ValueError("majority must be a strict majority of runs")


def noisy_forward(model: Model, policy: DefensePolicy, x: Array, rng: np.random.Generator) -> Array:
    """One defended forward pass; accepts (d,) or (n, d).

    Noise is drawn as sqrt(nu) * standard_normal so the consumed stream does
    not depend on nu; calibration relies on this to compare nu values under a
    pinned seed.
    """
    z = _check_width(x, model.input_dim, "input")
    if policy.mode == "none":
        for layer in model.layers:
            z = layer.apply(z)
        return z
    noisy_at = frozenset(policy.layer_set) if policy.mode == "feature" else frozenset((0,))
    if 0 in noisy_at:
        z = z + math.sqrt(policy.nu_at(0)) * rng.standard_normal(z.shape)
    for i, layer in enumerate(model.layers, start=1):
        z = layer.apply(z)
        if i in noisy_at:
            z = z + math.sqrt(policy.nu_at(i)) * rng.standard_normal(z.shape)
    return z


@dataclass
class _Counter:
    count: int = 0


class Oracle:
    """Query-counted, RNG-carrying view of a defended model.

    Single-owner stateful object (counter + RNG); create one per attack run.
    mode 'score' answers logits and labels; mode 'decision' answers labels
    only. Every forward (including each EOT replica) costs one query.
    """

    def __init__(self, model: Model, policy: DefensePolicy, seed=0, mode: str = "score",
                 eot_m: int = 1, *, _counter: _Counter | None = None):
        if mode not in ("score", "decision"):
            raise ValueError(f"mode must be 'score' or 'decision', got {mode!r}")
        if eot_m < 1:
            raise ValueError("eot_m must be >= 1")
        if policy.mode == "feature":
            for i in policy.layer_set:
                if not 0 <= i <= model.n_layers:
                    raise ShapeError(f"defense layer index {i} out of range [0, {model.n_layers}]")
        self.model = model
        self.policy = policy
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.mode = mode
        self.eot_m = int(eot_m)
        self._counter = _counter if _counter is not None else _Counter()

    @property
    def query_count(self) -> int:
        return self._counter.count

    def _forward_once(self, x: Array) -> Array:
        return noisy_forward(self.model, self.policy, x, self.rng)

    def _forward_averaged(self, x: Array) -> Array:
        out = self._forward_once(x)
        for _ in range(self.eot_m - 1):
            out = out + self._forward_once(x)
        return out / self.eot_m if self.eot_m > 1 else out

    def defended_forward(self, x: Array) -> Array:
        """Counted defended forward; with eot_m=M returns the mean of M draws."""
        out = self._forward_averaged(x)
        self._counter.count += self.eot_m
        return out

    def query_scores(self, x: Array) -> Array:
        if self.mode != "score":
            raise OracleAccessError("decision oracle does not expose scores")
        return self.defended_forward(x)

    def query_label(self, x: Array) -> int:
        return predicted_label(self.defended_forward(x))


def eot_wrap(oracle: Oracle, m: int) -> Oracle:
    """Averaging view of an oracle: shares the RNG and the query counter."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if m == 1:
        return oracle
    return Oracle(oracle.model, oracle.policy, oracle.rng, mode=oracle.mode,
                  eot_m=m, _counter=oracle._counter)


def verify_success(oracle: Oracle, x_adv: Array, y: int, cfg: VerificationConfig | None = None) -> bool:
    """Majority-vote misclassification over fresh runs, never counted as queries."""
    cfg = cfg or VerificationConfig()
    hits = 0
    for _ in range(cfg.runs):
        logits = oracle._forward_once(x_adv)
        if loss(logits, y, "margin") <= 0.0:
            hits += 1
    return hits >= cfg.majority


def clean_accuracy(oracle: Oracle, dataset, repeats: int = 1) -> float:
    """Fraction of samples whose label matches y in the strict majority of
    `repeats` independent queries. Deterministic under a fixed oracle seed."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    inputs, labels = dataset.inputs, dataset.labels
    if len(inputs) == 0:
        raise ValueError("empty dataset")
    correct = 0
    for x, y in zip(inputs, labels):
        hits = 0
        for _ in range(repeats):
            logits = oracle.defended_forward(x)
            if loss(logits, int(y), "margin") > 0.0:
                hits += 1
        if 2 * hits > repeats:
            correct += 1
    return correct / len(inputs)
