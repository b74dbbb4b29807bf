"""Feature-file ingestion, pair construction, and synthetic data generation.

Feature files are JSON lines, one record per line:
    {"sample_id", "identity", "scene", "language", "modality", "vector": [...]}

Training pairs come in two flavors: originals match a face and a voice
from the same identity and the same scene, slot by slot; augmented pairs
recombine a face and a voice of the same identity across different
original pairs. Trials pair each test face with its true voice and with
one random different-identity voice.

The synthetic generator emulates a bilingual identity corpus: every
identity owns a latent vector that both modalities mix through fixed
matrices, scenes add face-space offsets, and each scene's language adds a
voice-space offset, so cross-lingual verification degrades in a
controlled way.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

log = logging.getLogger(__name__)

MODALITIES = ("face", "voice")


class Pair(NamedTuple):
    face_id: str
    voice_id: str
    origin: str  # "original" | "augmented"


class Trial(NamedTuple):
    trial_id: str
    face_id: str
    voice_id: str
    label: int | None  # 1 same person, 0 different, None unknown


@dataclass(eq=False)
class FeatureRecord:
    """One embedding sample of one modality."""

    sample_id: str
    identity: str
    scene: str
    language: str
    modality: str
    vector: np.ndarray


@dataclass
class DatasetSummary:
    n_face: int
    n_voice: int
    n_identities: int
    n_scenes: int
    face_dim: int | None
    voice_dim: int | None
    languages: list[str]


# ---------------------------------------------------------------------------
# feature file io
# ---------------------------------------------------------------------------


def write_features(records: Iterable[FeatureRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({
                "sample_id": rec.sample_id,
                "identity": rec.identity,
                "scene": rec.scene,
                "language": rec.language,
                "modality": rec.modality,
                "vector": rec.vector.tolist(),
            }) + "\n")


def load_features(path) -> tuple[list[FeatureRecord], DatasetSummary]:
    """Parse and validate a feature file; errors name the offending line."""
    records: list[FeatureRecord] = []
    seen_ids: set[str] = set()
    dims: dict[str, int] = {}
    required = ("sample_id", "identity", "scene", "language", "modality", "vector")
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            missing = [k for k in required if k not in raw]
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {missing}")
            if raw["modality"] not in MODALITIES:
                raise ValueError(f"{path}:{lineno}: unknown modality {raw['modality']!r}")
            if raw["sample_id"] in seen_ids:
                raise ValueError(f"{path}:{lineno}: duplicate sample_id {raw['sample_id']!r}")
            vector = np.asarray(raw["vector"], dtype=np.float64)
            if vector.ndim != 1 or vector.size == 0:
                raise ValueError(f"{path}:{lineno}: vector must be a nonempty flat list")
            expected = dims.setdefault(raw["modality"], vector.size)
            if vector.size != expected:
                raise ValueError(
                    f"{path}:{lineno}: record {raw['sample_id']!r} has a "
                    f"{vector.size}-dimensional vector, expected {expected} for {raw['modality']}"
                )
            seen_ids.add(raw["sample_id"])
            records.append(FeatureRecord(raw["sample_id"], raw["identity"], raw["scene"],
                                         raw["language"], raw["modality"], vector))
    return records, summarize(records)


def summarize(records: list[FeatureRecord]) -> DatasetSummary:
    faces = [r for r in records if r.modality == "face"]
    voices = [r for r in records if r.modality == "voice"]
    return DatasetSummary(
        n_face=len(faces),
        n_voice=len(voices),
        n_identities=len({r.identity for r in records}),
        n_scenes=len({(r.identity, r.scene) for r in records}),
        face_dim=faces[0].vector.size if faces else None,
        voice_dim=voices[0].vector.size if voices else None,
        languages=sorted({r.language for r in records}),
    )


def records_by_id(records: Iterable[FeatureRecord]) -> dict[str, FeatureRecord]:
    return {r.sample_id: r for r in records}


def vectors_for(ids: Iterable[str], index: dict[str, FeatureRecord]) -> np.ndarray:
    return np.stack([index[i].vector for i in ids])


# ---------------------------------------------------------------------------
# pairs
# ---------------------------------------------------------------------------


def index_pairs(records: Iterable[FeatureRecord]) -> list[Pair]:
    """Scene-matched original pairs, one per co-occurring sample slot."""
    groups: dict[tuple[str, str], dict[str, list[str]]] = {}
    for rec in records:
        slot = groups.setdefault((rec.identity, rec.scene), {"face": [], "voice": []})
        slot[rec.modality].append(rec.sample_id)
    pairs: list[Pair] = []
    for (identity, scene) in sorted(groups):
        faces = sorted(groups[(identity, scene)]["face"])
        voices = sorted(groups[(identity, scene)]["voice"])
        if not faces or not voices:
            missing = "voice" if not voices else "face"
            log.warning("scene %r of identity %r has no %s samples; skipped", scene, identity, missing)
            continue
        if len(faces) != len(voices):
            log.warning("scene %r of identity %r has %d faces but %d voices; extra samples unpaired",
                        scene, identity, len(faces), len(voices))
        pairs.extend(Pair(f, v, "original") for f, v in zip(faces, voices))
    return pairs


def augment_pairs(records: Iterable[FeatureRecord], multiplier: int, seed: int) -> list[Pair]:
    """Originals plus same-identity cross-recombinations, up to multiplier x.

    Candidates are every (face_i, voice_j) with i != j drawn from an
    identity's original pairs; they are sampled uniformly without
    replacement until the list reaches multiplier * |originals| or the
    candidate pool runs out.
    """
    if not isinstance(multiplier, int) or multiplier < 1:
        raise ValueError(f"multiplier must be a positive int, got {multiplier!r}")
    records = list(records)
    originals = index_pairs(records)
    if multiplier == 1:
        return originals
    identity_of = {r.sample_id: r.identity for r in records}
    by_identity: dict[str, list[Pair]] = {}
    for pair in originals:
        by_identity.setdefault(identity_of[pair.face_id], []).append(pair)
    candidates: list[Pair] = []
    for identity in sorted(by_identity):
        pairs = by_identity[identity]
        for i, a in enumerate(pairs):
            for j, b in enumerate(pairs):
                if i != j:
                    candidates.append(Pair(a.face_id, b.voice_id, "augmented"))
    wanted = multiplier * len(originals) - len(originals)
    rng = np.random.default_rng([int(seed), 0xA06])
    take = min(wanted, len(candidates))
    chosen = rng.choice(len(candidates), size=take, replace=False) if take else []
    return originals + [candidates[i] for i in chosen]


def split_unseen(records: Iterable[FeatureRecord], test_identities: Iterable[str]
                 ) -> tuple[list[FeatureRecord], list[FeatureRecord]]:
    """Identity-disjoint train/test partition."""
    records = list(records)
    held_out = set(test_identities)
    present = {r.identity for r in records}
    unknown = sorted(held_out - present)
    if unknown:
        raise ValueError(f"test identities not present in the dataset: {unknown}")
    train = [r for r in records if r.identity not in held_out]
    test = [r for r in records if r.identity in held_out]
    if not train:
        raise ValueError("holding out every identity leaves an empty training set")
    return train, test


def make_batches(pairs: list[Pair], batch_size: int, seed: int, epoch: int) -> list[list[Pair]]:
    """Deterministic shuffled batches; a final batch of one merges backward."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be at least 2, got {batch_size}")
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 pairs to batch, got {len(pairs)}")
    rng = np.random.default_rng([int(seed), int(epoch), 0xBA7])
    order = rng.permutation(len(pairs))
    shuffled = [pairs[i] for i in order]
    batches = [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = batches[-1] + tail
    return batches


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------


def build_trials(records: Iterable[FeatureRecord], seed: int) -> list[Trial]:
    """Balanced target/nontarget trials from scene-matched test pairs."""
    records = list(records)
    targets = index_pairs(records)
    if not targets:
        raise ValueError("no scene-matched pairs available to build trials")
    identity_of = {r.sample_id: r.identity for r in records}
    voices = sorted(r.sample_id for r in records if r.modality == "voice")
    rng = np.random.default_rng([int(seed), 0x7121])
    trials: list[Trial] = []
    for k, pair in enumerate(targets):
        trials.append(Trial(f"t{2 * k:06d}", pair.face_id, pair.voice_id, 1))
        own = identity_of[pair.face_id]
        others = [v for v in voices if identity_of[v] != own]
        if not others:
            raise ValueError(f"identity {own!r} has no different-identity voices for nontarget trials")
        trials.append(Trial(f"t{2 * k + 1:06d}", pair.face_id, others[int(rng.integers(len(others)))], 0))
    return trials


def write_trials(trials: Iterable[Trial], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial_id", "face_sample_id", "voice_sample_id", "label"])
        for t in trials:
            writer.writerow([t.trial_id, t.face_id, t.voice_id, "" if t.label is None else t.label])


def load_trials(path) -> list[Trial]:
    trials: list[Trial] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"trial_id", "face_sample_id", "voice_sample_id", "label"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise ValueError(f"{path}: expected columns {sorted(expected)}, got {reader.fieldnames}")
        for row in reader:
            label = row["label"].strip()
            trials.append(Trial(row["trial_id"], row["face_sample_id"], row["voice_sample_id"],
                                None if label == "" else int(label)))
    return trials


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Shape and noise knobs of the generated corpus."""

    n_train_identities: int = 64
    n_test_identities: int = 6
    scenes_per_identity: int = 2
    samples_per_scene: int = 3
    face_dim: int = 4096
    voice_dim: int = 512
    latent_dim: int = 64
    scene_noise: float = 0.3
    sample_noise: float = 0.2
    languages: tuple[str, ...] = ("lang_a", "lang_b")
    voice_offset: float = 0.6
    seed: int = 0

    def validate(self) -> "SyntheticSpec":
        positive = ("n_train_identities", "n_test_identities", "scenes_per_identity",
                    "samples_per_scene", "face_dim", "voice_dim", "latent_dim")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.scene_noise < 0 or self.sample_noise < 0 or self.voice_offset < 0:
            raise ValueError("noise magnitudes must be nonnegative")
        if not self.languages:
            raise ValueError("at least one language is required")
        return self


@dataclass
class GenResult:
    features_path: Path
    attributes_path: Path
    truth_path: Path
    train_identities: list[str]
    test_identities: list[str]
    summary: DatasetSummary
    face_mixing: np.ndarray
    voice_mixing: np.ndarray


def gen_synthetic(spec: SyntheticSpec, out_dir) -> GenResult:
    """Write features, attribute predictions, and per-sample truth files.

    Every emission is a deterministic function of the spec (including its
    seed): identical specs produce bit-identical files.
    """
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng_mix = np.random.default_rng([spec.seed, 11])
    scale = 1.0 / math.sqrt(spec.latent_dim)
    face_mix = rng_mix.normal(0.0, scale, size=(spec.latent_dim, spec.face_dim))
    voice_mix = rng_mix.normal(0.0, scale, size=(spec.latent_dim, spec.voice_dim))
    rng_lang = np.random.default_rng([spec.seed, 19])
    lang_offsets = {lang: rng_lang.normal(0.0, spec.voice_offset, size=spec.voice_dim)
                    for lang in spec.languages}

    n_total = spec.n_train_identities + spec.n_test_identities
    train_ids = [f"id{k:03d}" for k in range(spec.n_train_identities)]
    test_ids = [f"id{k:03d}" for k in range(spec.n_train_identities, n_total)]

    records: list[FeatureRecord] = []
    attributes: list[dict] = []
    truth_rows: list[tuple[str, int, int]] = []
    for idx, identity in enumerate(train_ids + test_ids):
        rng_id = np.random.default_rng([spec.seed, 23, idx])
        z = rng_id.normal(size=spec.latent_dim)
        # fixed-norm identity codes: an identity is a direction, not a
        # magnitude, so raw norms carry no spurious cross-modal signal
        z *= math.sqrt(spec.latent_dim) / np.linalg.norm(z)
        age = int(rng_id.integers(18, 81))
        gender = int(rng_id.integers(0, 2))
        face_base = z @ face_mix
        voice_base = z @ voice_mix
        for s in range(spec.scenes_per_identity):
            scene = f"scene{s}"
            language = spec.languages[s % len(spec.languages)]
            scene_offset = rng_id.normal(0.0, spec.scene_noise, size=spec.face_dim)
            for k in range(spec.samples_per_scene):
                fvec = face_base + scene_offset + rng_id.normal(0.0, spec.sample_noise, size=spec.face_dim)
                vvec = voice_base + lang_offsets[language] + rng_id.normal(0.0, spec.sample_noise, size=spec.voice_dim)
                for modality, vec in (("face", fvec), ("voice", vvec)):
                    tag = "f" if modality == "face" else "v"
                    sample_id = f"{identity}_{scene}_{tag}{k}"
                    records.append(FeatureRecord(sample_id, identity, scene, language, modality, vec))
                    age_pred = float(np.clip(age + rng_id.normal(0.0, 4.0), 1.0, 100.0))
                    gender_prob = float(np.clip(gender + rng_id.normal(0.0, 0.1), 0.01, 0.99))
                    attributes.append({"sample_id": sample_id, "modality": modality,
                                       "age": age_pred, "gender_prob": gender_prob})
                    truth_rows.append((identity, age, gender))

    features_path = out / "features.jsonl"
    attributes_path = out / "attributes.jsonl"
    truth_path = out / "truth.csv"
    write_features(records, features_path)
    with open(attributes_path, "w") as fh:
        for row in attributes:
            fh.write(json.dumps(row) + "\n")
    with open(truth_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["identity", "age", "gender"])
        writer.writerows(truth_rows)
    return GenResult(features_path, attributes_path, truth_path, train_ids, test_ids,
                     summarize(records), face_mix, voice_mix)


def load_attributes(path) -> dict[str, dict]:
    """Attribute predictions keyed by sample_id."""
    table: dict[str, dict] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            for key in ("sample_id", "age", "gender_prob"):
                if key not in row:
                    raise ValueError(f"{path}:{lineno}: missing field {key!r}")
            table[row["sample_id"]] = row
    return table
