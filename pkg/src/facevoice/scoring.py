"""Trial scoring, equal error rate, and confidence-based score polarization.

Scores are Euclidean distances between 128-d face and voice embeddings:
higher means more likely two different people, so target (same-person)
trials are the low-score class. The EER estimator sweeps the sorted
unique scores, finds where the sign of FAR - FRR flips, and interpolates
the crossing linearly in (FAR, FRR) space, which makes the estimate
invariant under any strictly increasing transform of the scores.

Polarization divides a trial's score by a factor when the age/gender
matching confidence clears a threshold and multiplies it otherwise;
trials with missing attribute predictions pass through unadjusted and are
flagged rather than failing the run.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import Trial, load_attributes, load_trials


@dataclass
class TrialScore:
    trial_id: str
    face_id: str
    voice_id: str
    label: int | None
    score: float
    adjusted: float | None = None
    confidence: float | None = None


@dataclass
class ConfidenceConfig:
    """Weights and knobs of the polarization post-processor."""

    w_age: float = 0.5
    w_gender: float = 0.5
    threshold: float = 0.6
    alpha_pol: float = 1.2

    def __post_init__(self):
        if self.w_age < 0 or self.w_gender < 0:
            raise ValueError("confidence weights must be nonnegative")
        if abs(self.w_age + self.w_gender - 1.0) > 1e-9:
            raise ValueError(f"confidence weights must sum to 1, got {self.w_age} + {self.w_gender}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"confidence threshold must lie in [0, 1], got {self.threshold!r}")
        if self.alpha_pol < 1.0:
            raise ValueError(f"polarization factor must be >= 1, got {self.alpha_pol!r}")


@dataclass
class EerResult:
    eer: float
    threshold: float
    points: list[tuple[float, float, float]]  # (threshold, FAR, FRR)


# ---------------------------------------------------------------------------
# trial scores
# ---------------------------------------------------------------------------


def euclidean(face: np.ndarray, voice: np.ndarray) -> float:
    face = np.asarray(face, dtype=np.float64)
    voice = np.asarray(voice, dtype=np.float64)
    if face.shape != voice.shape:
        raise ValueError(f"embedding shapes differ: {face.shape} vs {voice.shape}")
    d = face - voice
    return float(math.sqrt(float((d * d).sum())))


def trial_scores(trials: Sequence[Trial], embeddings: Mapping[str, tuple[np.ndarray, np.ndarray]]
                 ) -> tuple[list[TrialScore], list[str]]:
    """Score each trial from its (face, voice) embedding pair.

    Trials with no embedding entry are rejected and returned in the
    second element as an error report.
    """
    scored: list[TrialScore] = []
    missing: list[str] = []
    for t in trials:
        pair = embeddings.get(t.trial_id)
        if pair is None:
            missing.append(t.trial_id)
            continue
        scored.append(TrialScore(t.trial_id, t.face_id, t.voice_id, t.label,
                                 euclidean(pair[0], pair[1])))
    return scored, missing


# ---------------------------------------------------------------------------
# EER / DET
# ---------------------------------------------------------------------------


def _split_by_label(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    l = np.asarray(labels)
    targets = np.sort(s[l == 1])
    nontargets = np.sort(s[l == 0])
    if targets.size == 0 or nontargets.size == 0:
        raise ValueError("EER needs at least one target and one nontarget trial")
    return targets, nontargets


def _operating_points(targets: np.ndarray, nontargets: np.ndarray
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, FAR, FRR) at -inf, each unique score, and +inf.

    Accept when score <= threshold: FAR is the accepted fraction of
    nontargets, FRR the rejected fraction of targets.
    """
    uniq = np.unique(np.concatenate([targets, nontargets]))
    far = np.searchsorted(nontargets, uniq, side="right") / nontargets.size
    frr = 1.0 - np.searchsorted(targets, uniq, side="right") / targets.size
    thresholds = np.concatenate([[-np.inf], uniq, [np.inf]])
    far = np.concatenate([[0.0], far, [1.0]])
    frr = np.concatenate([[1.0], frr, [0.0]])
    return thresholds, far, frr


def det_curve(scores: Sequence[float], labels: Sequence[int]) -> list[tuple[float, float, float]]:
    """DET polyline: one (threshold, FAR, FRR) point per unique score plus endpoints."""
    targets, nontargets = _split_by_label(scores, labels)
    thresholds, far, frr = _operating_points(targets, nontargets)
    return list(zip(thresholds.tolist(), far.tolist(), frr.tolist()))


def compute_eer(scores: Sequence[float], labels: Sequence[int]) -> EerResult:
    """Equal error rate via the interpolated FAR = FRR crossing."""
    targets, nontargets = _split_by_label(scores, labels)
    thresholds, far, frr = _operating_points(targets, nontargets)
    diff = far - frr
    k = int(np.argmax(diff >= 0.0))  # first index with FAR >= FRR; exists (last diff is 1)
    if diff[k] == 0.0:
        eer = float(far[k])
        threshold = float(thresholds[k])
    else:
        p = k - 1  # diff[0] = -1, so k >= 1
        denom = (far[k] - far[p]) + (frr[p] - frr[k])
        lam = (frr[p] - far[p]) / denom
        eer = float(far[p] + lam * (far[k] - far[p]))
        if np.isfinite(thresholds[p]) and np.isfinite(thresholds[k]):
            threshold = float(thresholds[p] + lam * (thresholds[k] - thresholds[p]))
        else:
            threshold = float(thresholds[k] if np.isfinite(thresholds[k]) else thresholds[p])
    points = list(zip(thresholds.tolist(), far.tolist(), frr.tolist()))
    return EerResult(eer=eer, threshold=threshold, points=points)


def eer_from_trials(scored: Sequence[TrialScore], use_adjusted: bool = False) -> EerResult:
    labeled = [t for t in scored if t.label in (0, 1)]
    values = [t.adjusted if use_adjusted else t.score for t in labeled]
    if use_adjusted and any(v is None for v in values):
        raise ValueError("adjusted scores requested but some trials are unadjusted")
    return compute_eer(values, [t.label for t in labeled])


# ---------------------------------------------------------------------------
# matching confidence and polarization
# ---------------------------------------------------------------------------


def age_confidence(age_voice: float, age_face: float) -> float:
    """Inverse absolute age gap, in (0, 1]."""
    for value in (age_voice, age_face):
        if not 1.0 <= value <= 100.0:
            raise ValueError(f"age prediction {value!r} outside [1, 100]")
    return 1.0 / (1.0 + abs(age_voice - age_face))


def gender_confidence(p_voice: float, p_face: float) -> float:
    """Probability both predictions agree on the reference gender class."""
    for value in (p_voice, p_face):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"gender probability {value!r} outside [0, 1]")
    return p_voice * p_face + (1.0 - p_voice) * (1.0 - p_face)


def combined_confidence(c_age: float, c_gender: float, config: ConfidenceConfig) -> float:
    return config.w_age * c_age + config.w_gender * c_gender


def polarize(score: float, confidence: float, config: ConfidenceConfig) -> float:
    """Shrink the score when confidence clears the threshold, grow it otherwise.

    The boundary confidence == threshold takes the upward branch.
    """
    if score < 0:
        raise ValueError(f"score must be nonnegative, got {score!r}")
    if not 0.0 <= confidence <= 1.0:
        raise ValueError(f"confidence {confidence!r} outside [0, 1]")
    if confidence > config.threshold:
        return score / config.alpha_pol
    return score * config.alpha_pol


def polarize_trials(scored: Sequence[TrialScore], attributes: Mapping[str, Mapping],
                    config: ConfidenceConfig) -> list[dict]:
    """Fill in adjusted scores in place; returns the per-trial audit rows.

    A trial whose face or voice sample has no attribute prediction is
    passed through unadjusted and flagged in the audit log.
    """
    audit: list[dict] = []
    for t in scored:
        face_attr = attributes.get(t.face_id)
        voice_attr = attributes.get(t.voice_id)
        if face_attr is None or voice_attr is None:
            t.adjusted = t.score
            t.confidence = None
            audit.append({"trial_id": t.trial_id, "age_confidence": None,
                          "gender_confidence": None, "confidence": None,
                          "direction": "none", "flagged": True})
            continue
        c_age = age_confidence(voice_attr["age"], face_attr["age"])
        c_gender = gender_confidence(voice_attr["gender_prob"], face_attr["gender_prob"])
        confidence = combined_confidence(c_age, c_gender, config)
        t.adjusted = polarize(t.score, confidence, config)
        t.confidence = confidence
        audit.append({"trial_id": t.trial_id, "age_confidence": c_age,
                      "gender_confidence": c_gender, "confidence": confidence,
                      "direction": "down" if confidence > config.threshold else "up",
                      "flagged": False})
    return audit


# ---------------------------------------------------------------------------
# file surfaces
# ---------------------------------------------------------------------------


def write_scores(scored: Sequence[TrialScore], path, adjusted: bool = False) -> None:
    """CSV score file: trial_id,score, plus adjusted/confidence columns if present."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if adjusted:
            writer.writerow(["trial_id", "score", "adjusted_score", "confidence"])
            for t in scored:
                writer.writerow([t.trial_id, repr(t.score), repr(t.adjusted),
                                 "" if t.confidence is None else repr(t.confidence)])
        else:
            writer.writerow(["trial_id", "score"])
            for t in scored:
                writer.writerow([t.trial_id, repr(t.score)])


def load_scores(path) -> dict[str, dict]:
    """Score rows keyed by trial_id; adjusted columns included when present."""
    rows: dict[str, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "trial_id" not in reader.fieldnames or "score" not in reader.fieldnames:
            raise ValueError(f"{path}: expected at least columns trial_id,score, got {reader.fieldnames}")
        for row in reader:
            entry = {"score": float(row["score"])}
            if row.get("adjusted_score"):
                entry["adjusted_score"] = float(row["adjusted_score"])
            if row.get("confidence"):
                entry["confidence"] = float(row["confidence"])
            rows[row["trial_id"]] = entry
    return rows


def write_det(points: Sequence[tuple[float, float, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "far", "frr"])
        for thr, far, frr in points:
            writer.writerow([repr(thr), repr(far), repr(frr)])


def write_audit(audit: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for row in audit:
            fh.write(json.dumps(row) + "\n")


def polarize_file(scores_path, trials_path, attributes_path, config: ConfidenceConfig,
                  out_path, audit_path) -> dict:
    """Adjust a score file against attribute predictions; returns run counts."""
    trials = load_trials(trials_path)
    raw = load_scores(scores_path)
    missing_scores = [t.trial_id for t in trials if t.trial_id not in raw]
    if missing_scores:
        raise ValueError(f"score file lacks trials: {missing_scores[:5]}"
                         + ("..." if len(missing_scores) > 5 else ""))
    attributes = load_attributes(attributes_path)
    scored = [TrialScore(t.trial_id, t.face_id, t.voice_id, t.label, raw[t.trial_id]["score"])
              for t in trials]
    audit = polarize_trials(scored, attributes, config)
    write_scores(scored, out_path, adjusted=True)
    write_audit(audit, audit_path)
    flagged = sum(1 for row in audit if row["flagged"])
    return {"n_trials": len(scored), "n_flagged": flagged,
            "out_path": str(out_path), "audit_path": str(audit_path)}
