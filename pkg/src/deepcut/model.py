"""Token classifier: embeddings, a small pre-norm self-attention encoder and
a linear head, with a fixed binary checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor
from .rng import Rng

MAGIC = b"DCUT"
FORMAT_VERSION = 1
MASK_PENALTY = -1e9


class PersistenceError(IOError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_len: int
    num_classes: int
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    dropout_rate: float = 0.1
    ff_mult: int = 4

    def validate(self) -> None:
        for key in ("vocab_size", "max_len", "num_classes", "hidden_dim", "num_layers", "num_heads", "ff_mult"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive, got {getattr(self, key)}")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.hidden_dim, cfg.hidden_dim * cfg.ff_mult
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_len, d),
    }
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ff.w1": (d, f), p + "ff.b1": (f,),
            p + "ff.w2": (f, d), p + "ff.b2": (d,),
        })
    shapes.update({
        "ln_f.g": (d,), "ln_f.b": (d,),
        "cls.w": (cfg.num_classes, d), "cls.b": (cfg.num_classes,),
    })
    return shapes


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    seed: int = 0
    steps: int = 0
    meta: dict = field(default_factory=dict)

    def copy(self) -> "ModelCheckpoint":
        return ModelCheckpoint(self.config, {k: v.copy() for k, v in self.params.items()},
                               self.seed, self.steps, dict(self.meta))

    def with_params(self, params: Mapping[str, np.ndarray], steps: int | None = None) -> "ModelCheckpoint":
        return ModelCheckpoint(self.config, dict(params), self.seed,
                               self.steps if steps is None else steps, dict(self.meta))

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def predict_proba(self, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return predict_proba(self, ids, mask)

    def equals(self, other: "ModelCheckpoint") -> bool:
        """Bitwise equality of config and every parameter."""
        if self.config != other.config or self.params.keys() != other.params.keys():
            return False
        return all(np.array_equal(self.params[k], other.params[k]) and
                   self.params[k].tobytes() == other.params[k].tobytes() for k in self.params)


def init_parameters(cfg: ModelConfig, rng: Rng) -> ModelCheckpoint:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
    cfg.validate()
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b"):
            params[name] = np.zeros(shape)
        elif leaf == "g":
            params[name] = np.ones(shape)
        else:
            fan_in = shape[-1] if name in ("tok_emb", "pos_emb", "cls.w") else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.child(name).uniform_range(-bound, bound, shape)
    return ModelCheckpoint(cfg, params, seed=rng.seed)


# ---------------------------------------------------------------------------
# forward

def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ag.add(ag.matmul(x, w), b)


def encode_batch(cfg: ModelConfig, p: Mapping[str, Tensor], ids: np.ndarray, mask: np.ndarray,
                 train: bool, rng: Rng | None) -> Tensor:
    """Per-token embeddings ``[B, T, hidden_dim]`` for a padded id matrix."""
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise DimensionError(f"expected [batch, length] ids, got shape {ids.shape}")
    bsz, width = ids.shape
    if width > cfg.max_len:
        raise ValueError(f"sequence length {width} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise IndexError(f"token id outside vocabulary of size {cfg.vocab_size}")
    rate = cfg.dropout_rate
    H, dh, d = cfg.num_heads, cfg.head_dim, cfg.hidden_dim

    x = ag.add(ag.index_rows(p["tok_emb"], ids), ag.index_rows(p["pos_emb"], np.arange(width)))
    x = ag.dropout(x, rate, rng, train)
    key_bias = np.where(np.asarray(mask, dtype=bool), 0.0, MASK_PENALTY)[:, None, None, :]
    inv_sqrt = 1.0 / np.sqrt(dh)

    def heads(t: Tensor) -> Tensor:
        return ag.transpose(ag.reshape(t, (bsz, width, H, dh)), (0, 2, 1, 3))

    for i in range(cfg.num_layers):
        pre = f"layer{i}."
        h = ag.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = heads(_linear(h, p[pre + "attn.wq"], p[pre + "attn.bq"]))
        k = heads(_linear(h, p[pre + "attn.wk"], p[pre + "attn.bk"]))
        v = heads(_linear(h, p[pre + "attn.wv"], p[pre + "attn.bv"]))
        scores = ag.add(ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), inv_sqrt), key_bias)
        att = ag.matmul(ag.softmax(scores, axis=-1), v)
        att = ag.reshape(ag.transpose(att, (0, 2, 1, 3)), (bsz, width, d))
        att = _linear(att, p[pre + "attn.wo"], p[pre + "attn.bo"])
        x = ag.add(x, ag.dropout(att, rate, rng, train))
        h = ag.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f = _linear(ag.gelu(_linear(h, p[pre + "ff.w1"], p[pre + "ff.b1"])), p[pre + "ff.w2"], p[pre + "ff.b2"])
        x = ag.add(x, ag.dropout(f, rate, rng, train))
    z = ag.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    # second dropout site: the view-augmentation pathway feeding head and contrast
    return ag.dropout(z, rate, rng, train)


def classify(p: Mapping[str, Tensor], z: Tensor) -> Tensor:
    """Logits ``z @ W^T + b`` over the last axis."""
    w = p["cls.w"]
    if z.shape[-1] != w.shape[1]:
        raise DimensionError(f"embedding width {z.shape[-1]} does not match classifier {w.shape}")
    return ag.add(ag.matmul(z, ag.transpose(w)), p["cls.b"])


def constant_params(ckpt: ModelCheckpoint) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in ckpt.params.items()}


def encode_tokens(ckpt: ModelCheckpoint, token_ids, mode: str = "eval", rng: Rng | None = None) -> Tensor:
    """Embeddings ``[L, hidden_dim]`` for one sentence."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    ids = np.asarray(token_ids, dtype=np.int64)[None, :]
    z = encode_batch(ckpt.config, constant_params(ckpt), ids, np.ones(ids.shape, bool), mode == "train", rng)
    return ag.reshape(z, z.shape[1:])


def classify_tokens(ckpt: ModelCheckpoint, z: Tensor) -> Tensor:
    return classify(constant_params(ckpt), z)


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Argmax over classes; ties go to the lowest class index."""
    return np.argmax(logits, axis=-1)


def predict_proba(ckpt: ModelCheckpoint, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Eval-mode class distributions ``[B, T, C]``."""
    p = constant_params(ckpt)
    logits = classify(p, encode_batch(ckpt.config, p, ids, mask, False, None))
    return np.exp(ag.log_softmax(logits).data)


# ---------------------------------------------------------------------------
# persistence

_CFG_INTS = ("vocab_size", "max_len", "num_classes", "hidden_dim", "num_layers", "num_heads", "ff_mult")


def checkpoint_save(ckpt: ModelCheckpoint, path) -> None:
    body = bytearray()
    for key in _CFG_INTS:
        body += struct.pack("<I", getattr(ckpt.config, key))
    body += struct.pack("<d", ckpt.config.dropout_rate)
    body += struct.pack("<QQ", ckpt.seed, ckpt.steps)
    body += struct.pack("<I", len(ckpt.params))
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        body += struct.pack("<I", len(raw)) + raw
        body += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    header = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(body))
    Path(path).write_bytes(bytes(header + body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise PersistenceError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_load(path, expect: Mapping[str, int] | None = None) -> ModelCheckpoint:
    """Read a checkpoint; ``expect`` pins config fields (e.g. ``num_classes``)."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise PersistenceError(f"{path} is not a checkpoint (bad magic)")
    version, length = r.unpack("<IQ")
    if version != FORMAT_VERSION:
        raise PersistenceError(f"format_version {version} unsupported (expected {FORMAT_VERSION})")
    if len(buf) - r.pos != length:
        raise PersistenceError(f"length header says {length} bytes, file holds {len(buf) - r.pos}")
    ints = dict(zip(_CFG_INTS, r.unpack(f"<{len(_CFG_INTS)}I")))
    (rate,) = r.unpack("<d")
    cfg = ModelConfig(dropout_rate=rate, **ints)
    for key, want in (expect or {}).items():
        got = getattr(cfg, key)
        if got != want:
            raise PersistenceError(f"{key}: checkpoint declares {got}, expected {want}")
    try:
        cfg.validate()
    except ValueError as exc:
        raise PersistenceError(f"invalid config block: {exc}") from exc
    seed, steps = r.unpack("<QQ")
    (count,) = r.unpack("<I")
    expected = parameter_shapes(cfg)
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I")
        if expected.get(name) != tuple(shape):
            raise PersistenceError(f"parameter {name}: shape {tuple(shape)} inconsistent with config "
                                   f"(expected {expected.get(name)})")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(nbytes), dtype="<f8").astype(np.float64).reshape(shape)
    if params.keys() != expected.keys():
        raise PersistenceError(f"missing parameters: {sorted(expected.keys() - params.keys())}")
    if r.pos != len(buf):
        raise PersistenceError("trailing bytes after last parameter")
    return ModelCheckpoint(cfg, params, seed=seed, steps=steps)


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
