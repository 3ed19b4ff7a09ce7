"""Nearest-centroid probe metrics: clean accuracy and attack success rate."""

from __future__ import annotations

import numpy as np

from ..numkit import EncoderNet
from .data import SampleSet
from .triggers import TriggerSpec, apply_trigger_spec


def _require_labels(*sets: SampleSet) -> None:
    for s in sets:
        if s.labels is None:
            raise ValueError("labels required for evaluation")


def class_centroids(reps: np.ndarray, labels: np.ndarray, classes: int) -> np.ndarray:
    reps = reps.astype(np.float64)
    cents = np.zeros((classes, reps.shape[1]))
    for c in range(classes):
        members = reps[labels == c]
        if len(members):
            cents[c] = members.mean(axis=0)
        else:
            cents[c] = np.inf
    return cents


def nearest_centroid(reps: np.ndarray, cents: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid (Euclidean); ties go to the lower index."""
    reps = reps.astype(np.float64)
    d2 = (
        np.sum(reps**2, axis=1)[:, None]
        - 2 * reps @ np.where(np.isfinite(cents), cents, 0).T
        + np.sum(np.where(np.isfinite(cents), cents, 0) ** 2, axis=1)[None, :]
    )
    d2[:, ~np.all(np.isfinite(cents), axis=1)] = np.inf
    return np.argmin(d2, axis=1)


def probe(enc: EncoderNet, reference: SampleSet) -> np.ndarray:
    """Class centroids of ``reference`` in representation space."""
    _require_labels(reference)
    classes = reference.classes
    return class_centroids(enc(reference.x), reference.labels, classes)


def eval_acc(enc: EncoderNet, test: SampleSet, reference: SampleSet | None = None) -> float:
    """Fraction of ``test`` whose nearest class centroid (fit on ``reference``)
    carries the true label."""
    reference = test if reference is None else reference
    _require_labels(test, reference)
    cents = probe(enc, reference)
    pred = nearest_centroid(enc(test.x), cents)
    return float(np.mean(pred == test.labels))


def eval_asr(
    enc: EncoderNet,
    test: SampleSet,
    spec: TriggerSpec,
    target_class: int,
    reference: SampleSet | None = None,
) -> float:
    """Fraction of triggered non-target ``test`` samples assigned to the target class."""
    reference = test if reference is None else reference
    _require_labels(test, reference)
    cents = probe(enc, reference)
    keep = test.labels != target_class
    if not np.any(keep):
        raise ValueError("no non-target samples to evaluate")
    triggered = apply_trigger_spec(test.x[keep], spec, test.geometry)
    pred = nearest_centroid(enc(triggered), cents)
    return float(np.mean(pred == target_class))
