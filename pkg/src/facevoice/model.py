"""Dual-branch embedding model for face-voice verification.

Two branches each project raw face and voice features into a shared
embedding space and fuse the pair into one vector. The primary branch
(trained first, then frozen) fuses with a softmax attention head; the
update branch (trained second) fuses with a gated 1-D convolution head.
A small attention combiner blends the two branch outputs per dimension.

Checkpoints are a JSON envelope with base64-encoded little-endian float64
arrays; save/load roundtrips are bit-exact.
"""

from __future__ import annotations

import base64
import json
import math
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import BatchNormState, DiffArray

CHECKPOINT_VERSION = 1
FUSION_KINDS = ("conv", "attention", "weight")
STAGES = ("init", "stage1", "stage2")


class CheckpointError(ValueError):
    """Raised when a checkpoint file cannot be read back safely."""


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    """Affine map x @ W + b with W stored as [in_dim, out_dim]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = DiffArray(glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim), requires_grad=True)
        self.b = DiffArray(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x) -> DiffArray:
        return dc.add(dc.matmul(x, self.W), self.b)

    def params(self) -> list[DiffArray]:
        return [self.W, self.b]


class Conv1d:
    """1-D convolution layer with kernels [out, in, k].

    `use_bias=False` keeps a fixed zero bias; used when the output feeds a
    batchnorm, where a bias would be cancelled by the mean subtraction.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 use_bias: bool = True):
        fan_in = in_channels * kernel_size
        fan_out = out_channels * kernel_size
        self.kernels = DiffArray(
            glorot_uniform(rng, (out_channels, in_channels, kernel_size), fan_in, fan_out),
            requires_grad=True,
        )
        self.bias = DiffArray(np.zeros(out_channels), requires_grad=use_bias)
        self.use_bias = use_bias
        self.stride = stride
        self.padding = padding

    def __call__(self, x) -> DiffArray:
        return dc.conv1d(x, self.kernels, self.bias, stride=self.stride, padding=self.padding)

    def params(self) -> list[DiffArray]:
        return [self.kernels, self.bias] if self.use_bias else [self.kernels]


class BatchNorm1d:
    """Learnable scale/shift over per-channel batch statistics."""

    def __init__(self, num_features: int):
        self.gamma = DiffArray(np.ones(num_features), requires_grad=True)
        self.beta = DiffArray(np.zeros(num_features), requires_grad=True)
        self.state = BatchNormState.create(num_features)

    def __call__(self, x, training: bool, update_running: bool = True) -> DiffArray:
        return dc.batchnorm1d(x, self.gamma, self.beta, self.state, training, update_running)

    def params(self) -> list[DiffArray]:
        return [self.gamma, self.beta]


class BranchParams:
    """One branch: two modality projections plus a fusion head."""

    def __init__(self, fusion: str, face_dim: int, voice_dim: int, embed_dim: int,
                 conv_channels: int, kernel_size: int, rng: np.random.Generator):
        if fusion not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {fusion!r}, expected one of {FUSION_KINDS}")
        self.fusion = fusion
        self.face_dim = face_dim
        self.voice_dim = voice_dim
        self.embed_dim = embed_dim
        self.frozen = False
        self.initialized = True
        self.face_proj = Linear(face_dim, embed_dim, rng)
        self.voice_proj = Linear(voice_dim, embed_dim, rng)
        if fusion == "conv":
            pad = kernel_size // 2
            self.conv_in = Conv1d(1, conv_channels, kernel_size, rng, padding=pad, use_bias=False)
            self.norm = BatchNorm1d(conv_channels)
            self.conv_att = Conv1d(conv_channels, 1, kernel_size, rng, padding=pad)
            self.compress = Linear(2 * embed_dim, embed_dim, rng)
        elif fusion == "attention":
            self.score = Linear(2 * embed_dim, 2, rng)
            self.out = Linear(embed_dim, embed_dim, rng)
        else:  # weight
            self.gate_logit = DiffArray(np.zeros(embed_dim), requires_grad=True)
            self.out = Linear(embed_dim, embed_dim, rng)

    @classmethod
    def uninitialized(cls, fusion: str = "attention") -> "BranchParams":
        branch = cls.__new__(cls)
        branch.fusion = fusion
        branch.frozen = False
        branch.initialized = False
        return branch

    def params(self) -> list[DiffArray]:
        out = self.face_proj.params() + self.voice_proj.params()
        if self.fusion == "conv":
            out += self.conv_in.params() + self.norm.params() + self.conv_att.params() + self.compress.params()
        elif self.fusion == "attention":
            out += self.score.params() + self.out.params()
        else:
            out += [self.gate_logit] + self.out.params()
        return out


class DualBranchModel:
    """Frozen baseline branch, trainable update branch, attention combiner."""

    def __init__(self, face_dim: int, voice_dim: int, embed_dim: int = 128,
                 conv_channels: int = 8, kernel_size: int = 3,
                 update_fusion: str = "conv", dual: bool = True, seed: int = 0):
        self.face_dim = face_dim
        self.voice_dim = voice_dim
        self.embed_dim = embed_dim
        self.conv_channels = conv_channels
        self.kernel_size = kernel_size
        self.update_fusion = update_fusion
        self.dual = dual
        self.seed = int(seed)
        self.stage = "init"
        rng = np.random.default_rng([self.seed, 0x6D6F])
        self.frozen_branch = BranchParams("attention", face_dim, voice_dim, embed_dim,
                                          conv_channels, kernel_size, rng)
        if dual:
            self.update_branch = BranchParams(update_fusion, face_dim, voice_dim, embed_dim,
                                              conv_channels, kernel_size, rng)
            self.combiner_hidden = Linear(2 * embed_dim, embed_dim, rng)
            self.combiner_out = Linear(embed_dim, embed_dim, rng)
        else:
            self.update_branch = None
            self.combiner_hidden = None
            self.combiner_out = None

    def hyperparams(self) -> dict:
        return {
            "face_dim": self.face_dim,
            "voice_dim": self.voice_dim,
            "embed_dim": self.embed_dim,
            "conv_channels": self.conv_channels,
            "kernel_size": self.kernel_size,
            "update_fusion": self.update_fusion,
            "dual": self.dual,
            "frozen_branches": [name for name in ("frozen", "update")
                                if getattr(self, f"{name}_branch", None) is not None
                                and getattr(self, f"{name}_branch").frozen],
        }

    def combiner_params(self) -> list[DiffArray]:
        if not self.dual:
            return []
        return self.combiner_hidden.params() + self.combiner_out.params()

    def trainable_params(self, stage: str) -> list[DiffArray]:
        if stage == "stage1":
            return [] if self.frozen_branch.frozen else self.frozen_branch.params()
        if stage == "stage2":
            if self.update_branch is None:
                raise ValueError("stage2 parameters requested from a single-branch model")
            return self.update_branch.params() + self.combiner_params()
        raise ValueError(f"unknown stage {stage!r}")


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def _as_batch(x, dim: int, what: str) -> DiffArray:
    x = x if isinstance(x, DiffArray) else DiffArray(x)
    if x.ndim == 1:
        x = dc.reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{what} must have {dim} columns, got shape {x.shape}")
    return x


def project_features(faces, voices, branch: BranchParams) -> tuple[DiffArray, DiffArray]:
    """Project raw modality features into the shared embedding space."""
    faces = _as_batch(faces, branch.face_dim, "face features")
    voices = _as_batch(voices, branch.voice_dim, "voice features")
    if faces.shape[0] != voices.shape[0]:
        raise ValueError(f"batch mismatch: {faces.shape[0]} faces vs {voices.shape[0]} voices")
    return branch.face_proj(faces), branch.voice_proj(voices)


def conv_gate(F, V, branch: BranchParams, training: bool = False,
              update_running: bool = True) -> tuple[DiffArray, DiffArray]:
    """Convolution scores for a projected pair: (gate [B,1,2d], sequence [B,1,2d]).

    The concatenated pair is read as a 1-channel sequence. A conv stack
    (conv -> batchnorm -> relu) extracts multichannel features; a second
    conv reduces them to a single-channel attention map. The gate is the
    sigmoid of the product of that map with the channel-mean of the conv
    features.
    """
    if branch.fusion != "conv":
        raise ValueError(f"conv gating needs a conv-fusion branch, got {branch.fusion!r}")
    x = dc.concat([F, V], axis=1)
    batch, length = x.shape
    x3 = dc.reshape(x, (batch, 1, length))
    c = branch.conv_in(x3)
    channels = c.shape[1]
    # batchnorm per channel over (batch, position)
    flat = dc.reshape(dc.transpose(c, (0, 2, 1)), (batch * length, channels))
    normed = branch.norm(flat, training=training, update_running=update_running)
    c = dc.transpose(dc.reshape(normed, (batch, length, channels)), (0, 2, 1))
    c = dc.relu(c)
    att = branch.conv_att(c)
    pooled = dc.mean(c, axis=1, keepdims=True)
    gate = dc.sigmoid(dc.mul(pooled, att))
    return gate, x3


def conv_gate_fuse(F, V, branch: BranchParams, training: bool = False,
                   update_running: bool = True) -> DiffArray:
    """Gated convolutional fusion: gate the pair sequence, compress to embed_dim."""
    gate, x3 = conv_gate(F, V, branch, training=training, update_running=update_running)
    gated = dc.mul(gate, x3)
    batch = x3.shape[0]
    length = x3.shape[2]
    return branch.compress(dc.reshape(gated, (batch, length)))


def attention_fuse(F, V, branch: BranchParams) -> DiffArray:
    """Softmax-weighted convex fusion of a projected face/voice pair."""
    if branch.fusion != "attention":
        raise ValueError(f"attention_fuse needs an attention-fusion branch, got {branch.fusion!r}")
    scores = branch.score(dc.concat([F, V], axis=1))
    shift = DiffArray(scores.data.max(axis=1, keepdims=True))
    e = dc.exp(dc.sub(scores, shift))
    w = dc.div(e, dc.sum(e, axis=1, keepdims=True))
    w_face = dc.slice_axis(w, 1, 0, 1)
    w_voice = dc.slice_axis(w, 1, 1, 2)
    fused = dc.add(dc.mul(w_face, F), dc.mul(w_voice, V))
    return branch.out(fused)


def weight_fuse(F, V, branch: BranchParams) -> DiffArray:
    """Learned per-dimension convex fusion of a projected face/voice pair."""
    if branch.fusion != "weight":
        raise ValueError(f"weight_fuse needs a weight-fusion branch, got {branch.fusion!r}")
    w = dc.sigmoid(branch.gate_logit)
    fused = dc.add(dc.mul(w, F), dc.mul(dc.sub(1.0, w), V))
    return branch.out(fused)


def branch_fuse(F, V, branch: BranchParams, training: bool = False,
                update_running: bool = True) -> DiffArray:
    if branch.fusion == "conv":
        return conv_gate_fuse(F, V, branch, training=training, update_running=update_running)
    if branch.fusion == "attention":
        return attention_fuse(F, V, branch)
    return weight_fuse(F, V, branch)


def combiner_weights(model: DualBranchModel, fused_update, fused_frozen) -> DiffArray:
    """Per-dimension blend weights in (0, 1) from the two branch outputs."""
    cat = dc.concat([fused_update, fused_frozen], axis=1)
    return dc.sigmoid(model.combiner_out(dc.relu(model.combiner_hidden(cat))))


def convex_mix(weights, a, b) -> DiffArray:
    """weights * a + (1 - weights) * b, elementwise."""
    return dc.add(dc.mul(weights, a), dc.mul(dc.sub(1.0, weights), b))


def combine_dual(fused_update, fused_frozen, model: DualBranchModel) -> DiffArray:
    if not model.dual:
        raise ValueError("combine_dual requires a dual model")
    w = combiner_weights(model, fused_update, fused_frozen)
    return convex_mix(w, fused_update, fused_frozen)


def forward_batch(faces, voices, model: DualBranchModel, stage: str,
                  training: bool = True, update_running: bool = True) -> DiffArray:
    """Fused embeddings for a batch of face/voice pairs.

    stage1 runs only the baseline branch. stage2 runs both branches and
    the combiner; it requires a model already trained through stage1 and
    keeps the frozen branch in eval mode.
    """
    fused, _, _ = forward_with_modalities(faces, voices, model, stage,
                                          training=training, update_running=update_running)
    return fused


def forward_with_modalities(faces, voices, model: DualBranchModel, stage: str,
                            training: bool = False, update_running: bool = True
                            ) -> tuple[DiffArray, DiffArray, DiffArray]:
    """(fused, face_emb, voice_emb) for a batch of pairs.

    The per-modality embeddings are the vectors verification scores
    compare: stage1 uses the baseline branch projections; stage2 blends
    the two branches' projections per dimension with the same combiner
    weights that blend the fused outputs. Training stacks all three into
    the loss batch so the scored embeddings are shaped directly.
    """
    if stage not in ("stage1", "stage2"):
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "stage1":
        F, V = project_features(faces, voices, model.frozen_branch)
        fused = branch_fuse(F, V, model.frozen_branch, training=False)
        return fused, F, V
    if model.update_branch is None:
        raise ValueError("stage2 forward requires a dual model")
    if model.stage == "init":
        raise ValueError("stage2 forward requires a model trained through stage1")
    F1, V1 = project_features(faces, voices, model.frozen_branch)
    fused_frozen = branch_fuse(F1, V1, model.frozen_branch, training=False)
    F2, V2 = project_features(faces, voices, model.update_branch)
    fused_update = branch_fuse(F2, V2, model.update_branch,
                               training=training, update_running=update_running)
    w = combiner_weights(model, fused_update, fused_frozen)
    fused = convex_mix(w, fused_update, fused_frozen)
    return fused, convex_mix(w, F2, F1), convex_mix(w, V2, V1)


def embed_trials(model: DualBranchModel, faces: np.ndarray, voices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-trial face and voice embeddings for verification scoring.

    Before stage2 (or on a single-branch model) these are the baseline
    branch projections; after stage2 they are the combiner-blended
    projections of both branches.
    """
    stage = "stage2" if (model.stage == "stage2" and model.update_branch is not None) else "stage1"
    _, face_emb, voice_emb = forward_with_modalities(faces, voices, model, stage, training=False)
    return face_emb.data, voice_emb.data


def freeze_branch(model: DualBranchModel, branch_id: str) -> DualBranchModel:
    """Lock a branch: excluded from optimizers, eval mode from here on."""
    branch = {"frozen": model.frozen_branch, "update": model.update_branch}.get(branch_id)
    if branch is None:
        raise ValueError(f"model has no branch {branch_id!r}")
    if not branch.initialized:
        raise ValueError(f"branch {branch_id!r} is uninitialized and cannot be frozen")
    branch.frozen = True
    for p in branch.params():
        p.requires_grad = False
    return model


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _named_arrays(model: DualBranchModel) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}

    def put_linear(prefix: str, layer: Linear):
        arrays[f"{prefix}.W"] = layer.W.data
        arrays[f"{prefix}.b"] = layer.b.data

    def put_branch(prefix: str, branch: BranchParams):
        put_linear(f"{prefix}.face_proj", branch.face_proj)
        put_linear(f"{prefix}.voice_proj", branch.voice_proj)
        if branch.fusion == "conv":
            arrays[f"{prefix}.conv_in.kernels"] = branch.conv_in.kernels.data
            arrays[f"{prefix}.norm.gamma"] = branch.norm.gamma.data
            arrays[f"{prefix}.norm.beta"] = branch.norm.beta.data
            arrays[f"{prefix}.norm.running_mean"] = branch.norm.state.mean
            arrays[f"{prefix}.norm.running_var"] = branch.norm.state.var
            arrays[f"{prefix}.conv_att.kernels"] = branch.conv_att.kernels.data
            arrays[f"{prefix}.conv_att.bias"] = branch.conv_att.bias.data
            put_linear(f"{prefix}.compress", branch.compress)
        elif branch.fusion == "attention":
            put_linear(f"{prefix}.score", branch.score)
            put_linear(f"{prefix}.out", branch.out)
        else:
            arrays[f"{prefix}.gate_logit"] = branch.gate_logit.data
            put_linear(f"{prefix}.out", branch.out)

    put_branch("frozen_branch", model.frozen_branch)
    if model.update_branch is not None:
        put_branch("update_branch", model.update_branch)
        put_linear("combiner_hidden", model.combiner_hidden)
        put_linear("combiner_out", model.combiner_out)
    return arrays


def _assign_named_array(model: DualBranchModel, name: str, value: np.ndarray) -> None:
    parts = name.split(".")
    obj = model
    branch_map = {"frozen_branch": model.frozen_branch, "update_branch": model.update_branch,
                  "combiner_hidden": model.combiner_hidden, "combiner_out": model.combiner_out}
    obj = branch_map[parts[0]]
    for part in parts[1:-1]:
        obj = getattr(obj, part)
    leaf = parts[-1]
    if leaf in ("running_mean", "running_var"):
        setattr(obj.state, "mean" if leaf == "running_mean" else "var", value)
    else:
        getattr(obj, leaf).data = value


def save_checkpoint(model: DualBranchModel, path) -> None:
    """Write the model as a canonical-JSON checkpoint (bit-exact arrays)."""
    arrays = {}
    for name, data in _named_arrays(model).items():
        arrays[name] = {
            "shape": list(data.shape),
            "data": base64.b64encode(np.ascontiguousarray(data, dtype="<f8").tobytes()).decode("ascii"),
        }
    payload = {
        "version": CHECKPOINT_VERSION,
        "hyperparams": model.hyperparams(),
        "stage": model.stage,
        "seed": model.seed,
        "arrays": arrays,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> DualBranchModel:
    """Rebuild a model from a checkpoint, validating before mutating."""
    text = Path(path).read_text()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON (truncated or corrupt): {exc}") from exc
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version!r} unsupported (expected {CHECKPOINT_VERSION})")
    for key in ("hyperparams", "stage", "seed", "arrays"):
        if key not in payload:
            raise CheckpointError(f"checkpoint missing field {key!r}")
    hp = payload["hyperparams"]
    frozen_names = hp.get("frozen_branches", [])
    model = DualBranchModel(
        face_dim=hp["face_dim"], voice_dim=hp["voice_dim"], embed_dim=hp["embed_dim"],
        conv_channels=hp["conv_channels"], kernel_size=hp["kernel_size"],
        update_fusion=hp["update_fusion"], dual=hp["dual"], seed=payload["seed"],
    )
    if payload["stage"] not in STAGES:
        raise CheckpointError(f"unknown stage tag {payload['stage']!r}")
    model.stage = payload["stage"]
    expected = _named_arrays(model)
    stored = payload["arrays"]
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise CheckpointError(f"checkpoint arrays do not match hyperparameters (missing {missing}, unexpected {extra})")
    for name, entry in stored.items():
        shape = tuple(entry["shape"])
        if shape != expected[name].shape:
            raise CheckpointError(f"array {name!r} has shape {shape}, expected {expected[name].shape}")
        try:
            raw = base64.b64decode(entry["data"], validate=True)
        except Exception as exc:
            raise CheckpointError(f"array {name!r} has corrupt data: {exc}") from exc
        count = int(np.prod(shape)) if shape else 1
        if len(raw) != 8 * count:
            raise CheckpointError(f"array {name!r} has {len(raw)} bytes, expected {8 * count}")
        _assign_named_array(model, name, np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape))
    for name in frozen_names:
        freeze_branch(model, name)
    return model
