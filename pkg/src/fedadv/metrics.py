"""Attack and transfer metrics over per-client prediction records.

Every metric works on plain label arrays captured before and after an
attack, so each value can be re-derived by directly counting flips. ASR
counts label flips on one client; AASR averages per-client ASR; AETR
measures how often examples that fooled the adversary's own model also flip
initially-correct predictions on other clients' models.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .attacks import AdversarialBatch
from .model import Architecture, ModelParams, predict

__all__ = [
    "EvalRecord",
    "evaluate_batch",
    "asr",
    "aasr",
    "aetr",
    "aetr_breakdown",
    "clean_accuracy",
]

log = logging.getLogger(__name__)


@dataclass
class EvalRecord:
    client_id: int
    pre_labels: np.ndarray   # predictions on the clean batch
    post_labels: np.ndarray  # predictions on the adversarial batch
    true_labels: np.ndarray
    is_adversary: bool = False

    def __post_init__(self):
        self.pre_labels = np.asarray(self.pre_labels)
        self.post_labels = np.asarray(self.post_labels)
        self.true_labels = np.asarray(self.true_labels)
        if not (self.pre_labels.shape == self.post_labels.shape == self.true_labels.shape):
            raise ValueError("label arrays must share one shape")
        if self.pre_labels.ndim != 1:
            raise ValueError("label arrays must be rank 1")


def evaluate_batch(arch: Architecture, params: ModelParams,
                   batch: AdversarialBatch, client_id: int,
                   is_adversary: bool = False) -> EvalRecord:
    """Predict on the clean and adversarial views with one client's model."""
    return EvalRecord(client_id,
                      predict(arch, params, batch.x_clean),
                      predict(arch, params, batch.x_adv),
                      batch.labels.copy(),
                      is_adversary)


def asr(record: EvalRecord) -> float:
    """Fraction of samples whose predicted label changed under attack."""
    if record.pre_labels.size == 0:
        raise ValueError("cannot score an empty record")
    return float(np.mean(record.pre_labels != record.post_labels))


def aasr(records: list[EvalRecord], include_adversary: bool = True) -> float:
    """Unweighted mean of per-client ASR."""
    kept = [r for r in records if include_adversary or not r.is_adversary]
    if not kept:
        raise ValueError("no records to average")
    return float(np.mean([asr(r) for r in kept]))


def aetr_breakdown(adversary: EvalRecord, benign: list[EvalRecord]):
    """AETR plus per-client detail.

    Selection = samples the adversary's own model flipped. For each benign
    client, the denominator keeps only selected samples that client
    classified correctly pre-attack; the client's transfer rate is the flip
    fraction within that set. Clients whose denominator is empty are skipped
    (and reported); an empty selection is an error since no transfer
    question exists.

    Returns (aetr, details, skipped) where details is a list of
    (client_id, denominator_size, flips, rate).
    """
    if not adversary.is_adversary:
        raise ValueError("first record must be the adversary's")
    selected = np.flatnonzero(adversary.pre_labels != adversary.post_labels)
    if selected.size == 0:
        raise ValueError("adversary flipped nothing; transfer rate undefined")
    details = []
    skipped = []
    rates = []
    for rec in benign:
        if rec.is_adversary:
            raise ValueError("benign list contains an adversary record")
        correct = rec.pre_labels[selected] == rec.true_labels[selected]
        dn = selected[correct]
        if dn.size == 0:
            skipped.append(rec.client_id)
            continue
        flips = int(np.sum(rec.pre_labels[dn] != rec.post_labels[dn]))
        rate = flips / dn.size
        details.append((rec.client_id, int(dn.size), flips, rate))
        rates.append(rate)
    if skipped:
        log.warning("AETR skipped clients with no correctly-classified "
                    "selected samples: %s", skipped)
    if not rates:
        raise ValueError("every benign client had an empty denominator")
    return float(np.mean(rates)), details, skipped


def aetr(adversary: EvalRecord, benign: list[EvalRecord]) -> float:
    value, _, _ = aetr_breakdown(adversary, benign)
    return value


def clean_accuracy(arch: Architecture, params: ModelParams, images,
                   labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot score an empty set")
    return float(np.mean(predict(arch, params, images) == labels))
