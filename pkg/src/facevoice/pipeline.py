"""End-to-end experiment pipeline: data, two-stage training, scoring, sweeps.

A run is fully determined by its RunConfig (including the seed): repeated
runs produce byte-identical score files and checkpoints. Each pipeline
stage is wrapped so failures abort with the stage name while artifacts
written by earlier stages stay on disk.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import data as fdata
from . import figures
from . import losses as flosses
from . import model as fmodel
from . import scoring as fscoring
from .data import SyntheticSpec
from .scoring import ConfidenceConfig

log = logging.getLogger(__name__)

STAGE2_EPOCH_OFFSET = 1_000_000  # keeps stage batch shuffles on distinct streams


class ConfigError(ValueError):
    """Invalid run configuration or config file."""


class StageError(RuntimeError):
    """A pipeline stage failed; .stage names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _from_dict(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where} has unknown keys: {unknown}")
    fixed = dict(raw)
    if cls is SyntheticSpec and "languages" in fixed:
        fixed["languages"] = tuple(fixed["languages"])
    try:
        return cls(**fixed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ModelSettings:
    face_dim: int | None = None  # inferred from the data when unset
    voice_dim: int | None = None
    embed_dim: int = 128
    conv_channels: int = 8
    kernel_size: int = 3
    update_fusion: str = "conv"
    dual: bool = True


@dataclass
class LossSettings:
    alpha: float = 2.0
    beta: float = 50.0
    theta: float = 0.6
    sigma: str = "sigmoid"
    weighted: bool = True

    def build(self) -> flosses.LossConfig:
        return flosses.LossConfig(alpha=self.alpha, beta=self.beta, theta=self.theta,
                                  sigma=self.sigma, weighted=self.weighted).validate()


@dataclass
class TrainSettings:
    stage1_epochs: int = 30
    stage2_epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3

    def validate(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be positive (stage2 may be 0 only when dual is off)")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class RunConfig:
    out_dir: str = "runs/run"
    features: str | None = None
    trials: str | None = None
    attributes: str | None = None
    test_identities: list[str] | None = None
    train_language: str | None = None
    seed: int = 0
    augment_multiplier: int = 4
    polarize: bool = True
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    model: ModelSettings = field(default_factory=ModelSettings)
    loss: LossSettings = field(default_factory=LossSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    confidence: ConfidenceConfig = field(default_factory=ConfidenceConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"config has unknown keys: {unknown}")
        kwargs = dict(raw)
        if "synthetic" in kwargs:
            kwargs["synthetic"] = (None if kwargs["synthetic"] is None
                                   else _from_dict(SyntheticSpec, kwargs["synthetic"], "synthetic"))
        for key, sub in (("model", ModelSettings), ("loss", LossSettings),
                         ("train", TrainSettings)):
            if key in kwargs:
                kwargs[key] = _from_dict(sub, kwargs[key], key)
        if "confidence" in kwargs:
            try:
                kwargs["confidence"] = _from_dict(ConfidenceConfig, kwargs["confidence"], "confidence")
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        if self.features is None and self.synthetic is None:
            raise ConfigError("either a features path or a synthetic spec is required")
        for name in ("features", "trials", "attributes"):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{name} path {value!r} does not exist")
        if self.features is not None and self.test_identities is None:
            raise ConfigError("test_identities are required when loading an external features file")
        if self.augment_multiplier < 1:
            raise ConfigError(f"augment_multiplier must be >= 1, got {self.augment_multiplier}")
        if self.model.update_fusion not in fmodel.FUSION_KINDS:
            raise ConfigError(f"update_fusion must be one of {fmodel.FUSION_KINDS}")
        self.train.validate()
        self.loss.build()
        return self

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# pipeline pieces
# ---------------------------------------------------------------------------


@dataclass
class DataBundle:
    records: list
    train_records: list
    test_records: list
    pairs: list
    index: dict
    trials: list
    attributes_path: str | None
    languages: list[str]


def prepare_data(config: RunConfig, out: Path) -> DataBundle:
    attributes_path = config.attributes
    if config.features is not None:
        records, _ = fdata.load_features(config.features)
        test_identities = list(config.test_identities)
    else:
        gen = fdata.gen_synthetic(config.synthetic, out / "data")
        records, _ = fdata.load_features(gen.features_path)
        test_identities = gen.test_identities
        if attributes_path is None:
            attributes_path = str(gen.attributes_path)
    train_records, test_records = fdata.split_unseen(records, test_identities)
    if config.train_language is not None:
        train_records = [r for r in train_records if r.language == config.train_language]
        if not train_records:
            raise ConfigError(f"no training records in language {config.train_language!r}")
    pairs = fdata.augment_pairs(train_records, config.augment_multiplier, config.seed)
    if config.trials is not None:
        trials = fdata.load_trials(config.trials)
    else:
        trials = fdata.build_trials(test_records, config.seed)
    return DataBundle(
        records=records, train_records=train_records, test_records=test_records,
        pairs=pairs, index=fdata.records_by_id(records), trials=trials,
        attributes_path=attributes_path,
        languages=sorted({r.language for r in records}),
    )


def _train_stage(model, stage: str, bundle: DataBundle, config: RunConfig,
                 epochs: int, epoch_offset: int, head_tag: int) -> list[float]:
    """Train one stage; returns the per-epoch mean batch loss curve."""
    loss_cfg = config.loss.build()
    loss_cfg.head = flosses.make_head(model.embed_dim, config.seed, tag=head_tag)
    params = model.trainable_params(stage) + loss_cfg.head.params()
    opt = dc.Adam(params, lr=config.train.learning_rate)
    curve: list[float] = []
    for epoch in range(epochs):
        batches = fdata.make_batches(bundle.pairs, config.train.batch_size,
                                     config.seed, epoch_offset + epoch)
        total = 0.0
        for batch in batches:
            faces = fdata.vectors_for([p.face_id for p in batch], bundle.index)
            voices = fdata.vectors_for([p.voice_id for p in batch], bundle.index)
            identities = [bundle.index[p.face_id].identity for p in batch]
            tape = dc.GradientTape()
            with tape:
                fused, face_emb, voice_emb = fmodel.forward_with_modalities(
                    faces, voices, model, stage, training=True)
                # the loss batch holds the fused embedding and both scored
                # modality embeddings of every pair, so training pulls
                # matched face/voice vectors together directly
                rows = dc.concat([fused, face_emb, voice_emb], axis=0)
                loss, _ = flosses.total_loss(rows, identities * 3, loss_cfg)
            dc.backward(loss, tape)
            opt.step()
            opt.zero_grad()
            total += loss.item()
        curve.append(total / len(batches))
    return curve


@dataclass
class TrainResult:
    model: object
    stage1_checkpoint: str
    stage2_checkpoint: str | None
    curves: dict


def train_model(config: RunConfig, bundle: DataBundle, out: Path) -> TrainResult:
    summary = fdata.summarize(bundle.records)
    face_dim = config.model.face_dim or summary.face_dim
    voice_dim = config.model.voice_dim or summary.voice_dim
    model = fmodel.DualBranchModel(
        face_dim=face_dim, voice_dim=voice_dim, embed_dim=config.model.embed_dim,
        conv_channels=config.model.conv_channels, kernel_size=config.model.kernel_size,
        update_fusion=config.model.update_fusion, dual=config.model.dual, seed=config.seed,
    )
    curves: dict[str, list[float]] = {}
    # a single-branch model gets the whole epoch budget in stage1
    stage1_epochs = config.train.stage1_epochs
    if not config.model.dual:
        stage1_epochs += config.train.stage2_epochs
    with _stage("train-stage1"):
        curves["stage1"] = _train_stage(model, "stage1", bundle, config,
                                        stage1_epochs, epoch_offset=0, head_tag=1)
        model.stage = "stage1"
        fmodel.freeze_branch(model, "frozen")
        stage1_path = out / "stage1.ckpt.json"
        fmodel.save_checkpoint(model, stage1_path)
    if not config.model.dual:
        return TrainResult(model, str(stage1_path), None, curves)
    with _stage("train-stage2"):
        model = fmodel.load_checkpoint(stage1_path)
        curves["stage2"] = _train_stage(model, "stage2", bundle, config,
                                        config.train.stage2_epochs,
                                        epoch_offset=STAGE2_EPOCH_OFFSET, head_tag=2)
        model.stage = "stage2"
        stage2_path = out / "stage2.ckpt.json"
        fmodel.save_checkpoint(model, stage2_path)
    return TrainResult(model, str(stage1_path), str(stage2_path), curves)


def embed_trial_file(model, trials, index, chunk_size: int = 512) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-trial (face, voice) embeddings keyed by trial id."""
    missing = [t.trial_id for t in trials
               if t.face_id not in index or t.voice_id not in index]
    if missing:
        raise ValueError(f"trials reference unknown samples: {missing[:5]}"
                         + ("..." if len(missing) > 5 else ""))
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for start in range(0, len(trials), chunk_size):
        batch = trials[start : start + chunk_size]
        faces = fdata.vectors_for([t.face_id for t in batch], index)
        voices = fdata.vectors_for([t.voice_id for t in batch], index)
        face_emb, voice_emb = fmodel.embed_trials(model, faces, voices)
        for i, t in enumerate(batch):
            out[t.trial_id] = (face_emb[i], voice_emb[i])
    return out


def write_embeddings(embeddings: dict[str, tuple[np.ndarray, np.ndarray]], path) -> None:
    with open(path, "w") as fh:
        for trial_id in sorted(embeddings):
            face, voice = embeddings[trial_id]
            fh.write(json.dumps({"trial_id": trial_id, "face": face.tolist(),
                                 "voice": voice.tolist()}) + "\n")


def load_embeddings(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            out[row["trial_id"]] = (np.asarray(row["face"], dtype=np.float64),
                                    np.asarray(row["voice"], dtype=np.float64))
    return out


def eer_metrics(scored, index, use_adjusted: bool = False) -> dict:
    """Overall EER plus a per-voice-language breakdown."""
    labeled = [t for t in scored if t.label in (0, 1)]
    result = fscoring.eer_from_trials(labeled, use_adjusted=use_adjusted)
    by_language: dict[str, float] = {}
    languages = sorted({index[t.voice_id].language for t in labeled if t.voice_id in index})
    for lang in languages:
        group = [t for t in labeled if index[t.voice_id].language == lang]
        labels = {t.label for t in group}
        if labels == {0, 1}:
            by_language[lang] = fscoring.eer_from_trials(group, use_adjusted=use_adjusted).eer
    return {"overall": result.eer, "threshold": result.threshold, "by_language": by_language}


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------


def run_experiment(config: RunConfig) -> dict:
    """Generate/load data, train both stages, score, polarize, evaluate.

    Returns the manifest dict (also written to <out_dir>/manifest.json).
    """
    started = time.time()
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _stage("prepare-data"):
        bundle = prepare_data(config, out)
        fdata.write_trials(bundle.trials, out / "trials.csv")
    result = train_model(config, bundle, out)
    with _stage("embed"):
        embeddings = embed_trial_file(result.model, bundle.trials, bundle.index)
        write_embeddings(embeddings, out / "embeddings.jsonl")
    with _stage("score"):
        scored, missing = fscoring.trial_scores(bundle.trials, embeddings)
        if missing:
            raise ValueError(f"unscored trials: {missing}")
        fscoring.write_scores(scored, out / "scores.csv")
    metrics: dict = {
        "train_loss": result.curves,
        "eer_raw": eer_metrics(scored, bundle.index),
    }
    artifacts: dict = {
        "trials": str(out / "trials.csv"),
        "embeddings": str(out / "embeddings.jsonl"),
        "scores": str(out / "scores.csv"),
        "stage1_checkpoint": result.stage1_checkpoint,
        "stage2_checkpoint": result.stage2_checkpoint,
    }
    labeled = [t for t in scored if t.label in (0, 1)]
    raw_det = fscoring.det_curve([t.score for t in labeled], [t.label for t in labeled])
    fscoring.write_det(raw_det, out / "det.csv")
    artifacts["det"] = str(out / "det.csv")
    det_figures = {"raw": raw_det}
    if config.polarize and bundle.attributes_path is not None:
        with _stage("polarize"):
            attributes = fdata.load_attributes(bundle.attributes_path)
            audit = fscoring.polarize_trials(scored, attributes, config.confidence)
            fscoring.write_scores(scored, out / "scores_adjusted.csv", adjusted=True)
            fscoring.write_audit(audit, out / "audit.jsonl")
            metrics["eer_adjusted"] = eer_metrics(scored, bundle.index, use_adjusted=True)
            adj_det = fscoring.det_curve([t.adjusted for t in labeled], [t.label for t in labeled])
            fscoring.write_det(adj_det, out / "det_adjusted.csv")
            det_figures["adjusted"] = adj_det
            artifacts["scores_adjusted"] = str(out / "scores_adjusted.csv")
            artifacts["audit"] = str(out / "audit.jsonl")
            artifacts["det_adjusted"] = str(out / "det_adjusted.csv")
    else:
        metrics["eer_adjusted"] = None
    with _stage("report-figures"):
        with open(out / "loss_curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "stage", "loss"])
            for stage_name, curve in result.curves.items():
                for epoch, value in enumerate(curve, start=1):
                    writer.writerow([epoch, stage_name, repr(value)])
        artifacts["loss_curve"] = str(out / "loss_curve.csv")
        artifacts["loss_figure"] = str(figures.save_loss_curves(result.curves, out / "loss_curve.png"))
        artifacts["det_figure"] = str(figures.save_det_curves(det_figures, out / "det.png"))
        artifacts["histogram_figure"] = str(figures.save_score_histogram(
            [t.score for t in labeled if t.label == 1],
            [t.score for t in labeled if t.label == 0],
            out / "score_hist.png"))
    manifest = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "metrics": metrics,
        "artifacts": artifacts,
        "wall_clock_seconds": time.time() - started,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------

SWEEP_PRESETS = {
    "fusion": ["weight", "attention", "conv", "no_dual"],
    "thresh": [0.4, 0.6, 0.8, None],
    "augment": [1, 2, 4, 6],
    "polarize": [1.0, 1.1, 1.2, 1.3],
}


def _apply_sweep_value(config: RunConfig, preset: str, value) -> tuple[RunConfig, str]:
    cfg = copy.deepcopy(config)
    if preset == "fusion":
        if value == "no_dual":
            cfg.model.dual = False
            label = "no_dual"
        else:
            cfg.model.dual = True
            cfg.model.update_fusion = value
            label = value
    elif preset == "thresh":
        if value is None:
            cfg.loss.weighted = False
            label = "none"
        else:
            cfg.loss.weighted = True
            cfg.loss.theta = value
            label = f"{value:g}"
    elif preset == "augment":
        cfg.augment_multiplier = value
        label = f"{value}x"
    elif preset == "polarize":
        cfg.confidence.alpha_pol = value
        label = f"{value:g}"
    else:
        raise ConfigError(f"unknown sweep preset {preset!r}; expected one of {sorted(SWEEP_PRESETS)}")
    return cfg, label


def ablation_sweep(preset: str, base: RunConfig, out_dir) -> dict:
    """Run one ablation grid over both training-language cohorts.

    Emits <preset>_sweep.csv (one row per config x train language, one EER
    column per test language, plus the per-config average) and a bar-chart
    figure alongside it.
    """
    if preset not in SWEEP_PRESETS:
        raise ConfigError(f"unknown sweep preset {preset!r}; expected one of {sorted(SWEEP_PRESETS)}")
    base.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if base.synthetic is not None:
        languages = list(base.synthetic.languages)
    else:
        records, summary = fdata.load_features(base.features)
        languages = summary.languages
    rows: list[dict] = []
    for value in SWEEP_PRESETS[preset]:
        cfg_value, label = _apply_sweep_value(base, preset, value)
        cell_eers: list[float] = []
        value_rows: list[dict] = []
        for train_lang in languages:
            cell = copy.deepcopy(cfg_value)
            cell.train_language = train_lang
            cell.out_dir = str(out / f"{preset}_{label}_{train_lang}")
            manifest = run_experiment(cell)
            adjusted = manifest["metrics"]["eer_adjusted"] or manifest["metrics"]["eer_raw"]
            row = {"preset": preset, "config": label, "train_language": train_lang}
            for lang in languages:
                eer = adjusted["by_language"].get(lang)
                if eer is None:
                    raise RuntimeError(f"sweep cell {label}/{train_lang} has no EER for {lang}")
                row[f"eer_{lang}"] = eer
                cell_eers.append(eer)
            value_rows.append(row)
        avg = float(np.mean(cell_eers))
        for row in value_rows:
            row["avg"] = avg
        rows.extend(value_rows)
    table_path = out / f"{preset}_sweep.csv"
    with open(table_path, "w", newline="") as fh:
        columns = ["preset", "config", "train_language"] + [f"eer_{lang}" for lang in languages] + ["avg"]
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    figure_rows = [{"config": f"{r['config']}\n({r['train_language']})", "test_language": lang,
                    "eer": r[f"eer_{lang}"]} for r in rows for lang in languages]
    figure_path = figures.save_sweep_bars(figure_rows, value_key="eer", group_key="test_language",
                                          path=out / f"{preset}_sweep.png", title=f"{preset} sweep")
    return {"preset": preset, "rows": rows, "table": str(table_path), "figure": str(figure_path)}


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def _find_manifests(paths) -> list[Path]:
    found: list[Path] = []
    for p in paths:
        path = Path(p)
        if path.is_dir():
            found.extend(sorted(path.rglob("manifest.json")))
        elif path.exists():
            found.append(path)
        else:
            log.warning("manifest path %s does not exist; skipped", path)
    return found


def report(paths, out_dir=None) -> str:
    """Human-readable summary of one or more runs, with comparison figures."""
    manifests = []
    for path in _find_manifests(paths):
        try:
            manifests.append((path, json.loads(path.read_text())))
        except json.JSONDecodeError as exc:
            log.warning("manifest %s unreadable (%s); skipped", path, exc)
    lines: list[str] = []
    for path, manifest in manifests:
        metrics = manifest.get("metrics", {})
        raw = metrics.get("eer_raw", {})
        adjusted = metrics.get("eer_adjusted")
        lines.append(f"run: {path.parent}")
        lines.append(f"  config hash: {manifest.get('config_hash', '?')[:12]}  seed: {manifest.get('seed')}")
        lines.append(f"  EER raw: {raw.get('overall'):.4f}" if raw.get("overall") is not None else "  EER raw: n/a")
        if adjusted:
            lines.append(f"  EER adjusted: {adjusted['overall']:.4f}")
        for lang, eer in sorted((raw.get("by_language") or {}).items()):
            lines.append(f"    raw {lang}: {eer:.4f}")
        curves = metrics.get("train_loss", {})
        for stage_name, curve in curves.items():
            if curve:
                lines.append(f"  {stage_name}: {len(curve)} epochs, final loss {curve[-1]:.4f}")
        lines.append("")
    if len(manifests) > 1:
        lines.append("comparison (raw overall EER):")
        for path, manifest in manifests:
            overall = manifest.get("metrics", {}).get("eer_raw", {}).get("overall")
            lines.append(f"  {path.parent.name}: {overall:.4f}" if overall is not None else f"  {path.parent.name}: n/a")
        lines.append("")
    text = "\n".join(lines) if lines else "no manifests found\n"
    if out_dir is not None and manifests:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        with open(out / "report.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["run", "eer_raw", "eer_adjusted"])
            for path, manifest in manifests:
                metrics = manifest.get("metrics", {})
                raw = (metrics.get("eer_raw") or {}).get("overall")
                adj = (metrics.get("eer_adjusted") or {}).get("overall") if metrics.get("eer_adjusted") else None
                writer.writerow([path.parent.name,
                                 "" if raw is None else repr(raw),
                                 "" if adj is None else repr(adj)])
        curves = {f"{path.parent.name}/{stage}": curve
                  for path, manifest in manifests
                  for stage, curve in (manifest.get("metrics", {}).get("train_loss") or {}).items()}
        if curves:
            figures.save_loss_curves(curves, out / "report_loss.png")
    return text
