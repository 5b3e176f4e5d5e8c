"""Frame-level SED network: temporal conv extractor plus growable per-class heads."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"UCILMDL1"
HEAD_INIT_SCALE = 0.1


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 64
    frame_count: int = 156
    conv_channels: tuple = (32, 64, 64)
    kernel_width: int = 3
    embedding_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        dims = [self.n_mels, self.frame_count, self.kernel_width, self.embedding_dim, *self.conv_channels]
        if not self.conv_channels or min(dims) < 1:
            raise ValueError(f"all model dimensions must be >= 1: {self}")
        if self.kernel_width % 2 == 0:
            raise ValueError("kernel_width must be odd")


@dataclass
class SedModel:
    """Feature extractor parameters plus one (weight column, bias) head per class.

    Heads live as columns of ``heads.w`` (D x |C|) and entries of ``heads.b``,
    ordered like ``class_order``.
    """

    config: ModelConfig
    params: dict
    class_order: list = field(default_factory=list)
    frozen: bool = False

    @property
    def n_classes(self) -> int:
        return len(self.class_order)

    def head(self, class_id):
        k = self.class_order.index(class_id)
        return self.params["heads.w"][:, k], self.params["heads.b"][k]

    def class_index(self, classes) -> list[int]:
        return [self.class_order.index(c) for c in classes]

    def with_params(self, params: dict) -> "SedModel":
        if self.frozen:
            raise ValueError("snapshot models never receive parameter updates")
        return SedModel(self.config, dict(params), list(self.class_order))


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _head_init(rng, d, n):
    # small heads keep initial logits near 0 whatever the embedding scale
    return _he_uniform(rng, (d, n), d) * HEAD_INIT_SCALE


def init_model(config: ModelConfig, classes, seed: int) -> SedModel:
    classes = list(classes)
    if len(set(classes)) != len(classes):
        raise ValueError("duplicate class ids")
    rng = np.random.default_rng(seed)
    params = {}
    cin = config.n_mels
    k = config.kernel_width
    for i, cout in enumerate(config.conv_channels):
        params[f"conv{i}.w"] = _he_uniform(rng, (k, cin, cout), k * cin)
        params[f"conv{i}.b"] = np.zeros(cout)
        cin = cout
    d = config.embedding_dim
    params["proj.w"] = _he_uniform(rng, (cin, d), cin)
    params["proj.b"] = np.zeros(d)
    params["heads.w"] = _head_init(rng, d, len(classes))
    params["heads.b"] = np.zeros(len(classes))
    return SedModel(config, params, classes)


def forward(model: SedModel, clips, params: dict | None = None):
    """Run clips (B, T, F) or (T, F) through the network.

    Returns ``(frame_logits, frame_embeddings)`` as tensors of shape
    (B, T, |C|) and (B, T, D). Pass ``params`` (name -> Tensor) to record the
    computation on a tape.
    """
    p = model.params if params is None else params
    x = ad.tensor(clips)
    single = x.data.ndim == 2
    if single:
        x = ad.tensor(x.data[None])
    cfg = model.config
    if x.data.ndim != 3 or x.shape[2] != cfg.n_mels:
        raise ad.ShapeError(f"forward: expected clips (B, T, {cfg.n_mels}), got {np.shape(clips)}")
    h = x
    for i in range(len(cfg.conv_channels)):
        h = ad.relu(ad.conv1d(h, p[f"conv{i}.w"]) + p[f"conv{i}.b"])
    emb = ad.matmul(h, p["proj.w"]) + p["proj.b"]
    logits = ad.matmul(emb, p["heads.w"]) + p["heads.b"]
    if single:
        # strip the batch axis without a primitive; only used untaped
        if logits.recorded:
            raise ad.ShapeError("forward: pass a batch axis when recording")
        return ad.tensor(logits.data[0]), ad.tensor(emb.data[0])
    return logits, emb


def expand_heads(model: SedModel, new_class_ids, seed: int) -> SedModel:
    """Append freshly initialised heads; existing parameters stay bitwise equal."""
    new_class_ids = list(new_class_ids)
    if len(set(new_class_ids)) != len(new_class_ids) or set(new_class_ids) & set(model.class_order):
        raise ValueError(f"duplicate class id in expansion: {new_class_ids}")
    params = {k: v.copy() for k, v in model.params.items()}
    if new_class_ids:
        d = model.config.embedding_dim
        rng = np.random.default_rng(seed)
        w_new = _head_init(rng, d, len(new_class_ids))
        params["heads.w"] = np.concatenate([params["heads.w"], w_new], axis=1)
        params["heads.b"] = np.concatenate([params["heads.b"], np.zeros(len(new_class_ids))])
    return SedModel(model.config, params, model.class_order + new_class_ids)


def snapshot(model: SedModel) -> SedModel:
    """Deep read-only copy (the frozen previous model)."""
    params = {}
    for k, v in model.params.items():
        a = np.array(v, copy=True)
        a.flags.writeable = False
        params[k] = a
    return SedModel(model.config, params, list(model.class_order), frozen=True)


def thaw(model: SedModel) -> SedModel:
    return SedModel(model.config, {k: np.array(v) for k, v in model.params.items()}, list(model.class_order))


def check_layout(a: SedModel, b: SedModel) -> None:
    if a.class_order != b.class_order or a.params.keys() != b.params.keys():
        raise ValueError("model layouts differ")
    for k in a.params:
        if a.params[k].shape != b.params[k].shape:
            raise ValueError(f"model layouts differ at {k}: {a.params[k].shape} vs {b.params[k].shape}")


def ema_update(teacher: SedModel, student: SedModel, decay: float = 0.999) -> SedModel:
    """t <- decay * t + (1 - decay) * s for every parameter."""
    check_layout(teacher, student)
    params = {k: decay * teacher.params[k] + (1.0 - decay) * student.params[k] for k in teacher.params}
    return SedModel(teacher.config, params, list(teacher.class_order))


def _write_block(buf, payload: bytes) -> None:
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)


def checkpoint_bytes(model: SedModel) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    _write_block(buf, json.dumps(asdict(model.config), sort_keys=True).encode())
    _write_block(buf, json.dumps(model.class_order).encode())
    for v in model.params.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return buf.getvalue()


def model_hash(model: SedModel) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()


def save_checkpoint(model: SedModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> SedModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    pos = 8

    def block():
        nonlocal pos
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        out = raw[pos : pos + n]
        pos += n
        return json.loads(out)

    config = ModelConfig(**block())
    classes = block()
    template = init_model(config, classes, seed=0)
    params = {}
    for k, v in template.params.items():
        n = v.size * 8
        params[k] = np.frombuffer(raw[pos : pos + n], dtype="<f8").reshape(v.shape).astype(np.float64)
        pos += n
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return SedModel(config, params, classes)
