"""Attack objectives evaluated on a finished training run."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TEST_ERROR = "test_error"
TARGETED = "targeted"
DOS = "dos"
OBJECTIVES = (TEST_ERROR, TARGETED, DOS)


@dataclass(frozen=True)
class ObjectiveSpec:
    """What the adversary maximizes.

    ``targets`` is required for ``targeted``: one entry per test sample, 0 or
    1 for an attacked sample and -1 for one that is ignored.
    """

    kind: str = TEST_ERROR
    targets: tuple | None = None

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.kind!r}")
        if self.kind == TARGETED:
            if self.targets is None:
                raise ValueError("targeted objective needs per-test-sample targets")
            object.__setattr__(self, "targets", tuple(int(v) for v in self.targets))
            if any(v not in (-1, 0, 1) for v in self.targets):
                raise ValueError("targets must be 0, 1, or -1 (not attacked)")

    @property
    def integral(self) -> bool:
        return self.kind != DOS

    def target_array(self, n_test: int) -> np.ndarray:
        t = np.asarray(self.targets)
        if t.shape != (n_test,):
            raise ValueError(f"expected {n_test} targets, got {t.shape}")
        return t

    def to_dict(self) -> dict:
        return {"kind": self.kind, "targets": None if self.targets is None else list(self.targets)}


def predictions(logits: np.ndarray) -> np.ndarray:
    """Class 1 iff logit >= 0."""
    return (np.asarray(logits) >= 0).astype(float)


def score_logits(objective: ObjectiveSpec, test_logits: np.ndarray, y_test: np.ndarray) -> np.ndarray:
    """Objective from final test logits; the last axis runs over test samples."""
    pred = predictions(test_logits)
    if objective.kind == TEST_ERROR:
        return np.sum(pred != y_test, axis=-1).astype(float)
    if objective.kind == TARGETED:
        t = objective.target_array(len(y_test))
        mask = t >= 0
        return np.sum((pred == t) & mask, axis=-1).astype(float)
    raise ValueError("DoS objective is scored from training losses")
