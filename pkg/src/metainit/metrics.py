"""Frame/utterance error rates and cross-entropy for a labeled split."""

from __future__ import annotations

import numpy as np

from .model import LabeledBatch, ParameterSet, forward


def evaluate(params: ParameterSet, batch: LabeledBatch, chunk: int = 32) -> dict[str, float]:
    """Error rates in percent; ``ce`` is mean per-frame cross-entropy (nats)."""
    if len(batch) == 0:
        raise ValueError("cannot evaluate an empty split")
    correct_frames = 0
    correct_utts = 0
    nll = 0.0
    n_frames = 0
    for start in range(0, len(batch), chunk):
        sub = LabeledBatch(batch.features[start : start + chunk], batch.labels[start : start + chunk])
        for logp, y in zip(forward(params, sub), sub.labels):
            pred = np.argmax(logp, axis=1)
            correct_frames += int(np.sum(pred == y))
            votes = np.bincount(pred, minlength=logp.shape[1])
            correct_utts += int(np.argmax(votes) == np.bincount(y).argmax())
            nll -= float(np.sum(logp[np.arange(len(y)), y]))
            n_frames += len(y)
    return {
        "fer": 100.0 * (1.0 - correct_frames / n_frames),
        "uer": 100.0 * (1.0 - correct_utts / len(batch)),
        "ce": nll / n_frames,
        "n_frames": n_frames,
        "n_utts": len(batch),
    }
