"""A tiny pre-norm decoder-only LM with the seven fusible weight kinds.

Per layer: causal multi-head self-attention (attn_q/attn_k/attn_v/attn_o)
and a gated MLP (mlp_gate/mlp_up/mlp_down, silu(gate) * up -> down), with
RMSNorm before each block. Positions are learned absolute embeddings and the
output head is tied to the token embedding; neither belongs to the seven
fusible component kinds, and neither do the norm gains.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError

COMPONENT_KINDS = (
    "attn_q",
    "attn_k",
    "attn_v",
    "attn_o",
    "mlp_gate",
    "mlp_up",
    "mlp_down",
)

CHECKPOINT_MAGIC = b"EVOCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_hidden: int = 128
    max_seq_len: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "dim", "n_layers", "n_heads", "mlp_hidden", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dim % self.n_heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be at least 2")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "dim": self.dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "mlp_hidden": self.mlp_hidden,
            "max_seq_len": self.max_seq_len,
            "seed": self.seed,
        }

    def architecture(self) -> dict:
        """Shape-determining fields only (the init seed is excluded)."""
        d = self.to_dict()
        d.pop("seed")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True, order=True)
class ComponentId:
    """Address of one fusible weight matrix: (layer index, kind)."""

    layer: int
    kind: str

    def __post_init__(self):
        if self.kind not in COMPONENT_KINDS:
            raise ConfigError(f"unknown component kind {self.kind!r}")
        if self.layer < 0:
            raise ConfigError(f"negative layer index {self.layer}")

    @property
    def name(self) -> str:
        return f"layer{self.layer}.{self.kind}"


def component_ids(config: ModelConfig) -> list[ComponentId]:
    """All 7*n_layers component addresses, layer-major, kinds in fixed order."""
    return [ComponentId(layer, kind) for layer in range(config.n_layers) for kind in COMPONENT_KINDS]


def _param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, m = config.dim, config.mlp_hidden
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("token_embedding", (config.vocab_size, d)),
        ("pos_embedding", (config.max_seq_len, d)),
    ]
    for layer in range(config.n_layers):
        p = f"layer{layer}."
        shapes += [
            (p + "attn_norm", (d,)),
            (p + "attn_q", (d, d)),
            (p + "attn_k", (d, d)),
            (p + "attn_v", (d, d)),
            (p + "attn_o", (d, d)),
            (p + "mlp_norm", (d,)),
            (p + "mlp_gate", (d, m)),
            (p + "mlp_up", (d, m)),
            (p + "mlp_down", (m, d)),
        ]
    shapes.append(("final_norm", (d,)))
    return shapes


class ModelParams:
    """Full parameter set, addressable by name and by ComponentId.

    Parameter order is fixed by the architecture, which keeps RNG draws,
    serialization, and hashing stable across runs.
    """

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = dict(_param_shapes(config))
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, t in tensors.items():
            if t.data.shape != expected[name]:
                raise ShapeError(f"{name}: shape {t.data.shape} != expected {expected[name]}")
        self.config = config
        self.tensors = tensors
        self._names = [name for name, _ in _param_shapes(config)]

    def names(self) -> list[str]:
        return list(self._names)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def component(self, cid: ComponentId) -> Tensor:
        if cid.layer >= self.config.n_layers:
            raise ConfigError(f"layer {cid.layer} outside [0, {self.config.n_layers})")
        return self.tensors[cid.name]

    def component_ids(self) -> list[ComponentId]:
        return component_ids(self.config)

    def deep_clone(self) -> "ModelParams":
        clones = {name: ad.parameter(self.tensors[name].data.copy()) for name in self._names}
        return ModelParams(self.config, clones)

    def parameter_count(self) -> int:
        return sum(self.tensors[name].data.size for name in self._names)

    def zero_grads(self) -> None:
        for name in self._names:
            self.tensors[name].zero_grad()

    def grads(self) -> dict[str, Optional[np.ndarray]]:
        return {name: self.tensors[name].grad for name in self._names}

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in self._names:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()

    def allclose(self, other: "ModelParams", **kw) -> bool:
        return self.config == other.config and all(
            np.allclose(self.tensors[n].data, other.tensors[n].data, **kw) for n in self._names
        )


def init_model(config: ModelConfig) -> ModelParams:
    """Deterministic scaled-uniform init: U(+-1/sqrt(fan_in)) per matrix."""
    rng = np.random.default_rng(config.seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in _param_shapes(config):
        if name.endswith("_norm"):
            data = np.ones(shape, dtype=np.float64)
        else:
            fan_in = shape[0] if len(shape) == 1 else shape[0]
            # embeddings scale with dim, projections with their input width
            if name in ("token_embedding", "pos_embedding"):
                fan_in = shape[1]
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = ad.parameter(data)
    return ModelParams(config, tensors)


def tokenize(text: str, tokenizer) -> list[int]:
    """Encode free text with the run tokenizer; empty input is an error."""
    if not text:
        raise DataError("cannot tokenize an empty edit text")
    ids = tokenizer.encode(text)
    if not ids:
        raise DataError("edit text tokenized to zero tokens")
    return ids


def embed(params: ModelParams, tokens: Sequence[int]) -> Tensor:
    """Gather token embedding rows: out[l] = token_embedding[tokens[l]]."""
    vocab = params.config.vocab_size
    for t in tokens:
        if not (0 <= t < vocab):
            raise IndexError(f"token id {t} out of range [0, {vocab})")
    return ad.embedding_gather(params["token_embedding"], list(tokens))


def forward_from_embeddings(params: ModelParams, embeddings: Tensor) -> Tensor:
    """Causal decoder pass from an [L,dim] embedding matrix to [L,V] logits.

    Position l's logits depend only on embedding rows <= l; the caller may
    substitute a perturbed embedding matrix without touching the rest of
    the pass.
    """
    cfg = params.config
    seq_len, dim = embeddings.data.shape
    if dim != cfg.dim:
        raise ShapeError(f"embedding width {dim} != model dim {cfg.dim}")
    if seq_len > cfg.max_seq_len:
        raise ShapeError(f"sequence length {seq_len} exceeds max_seq_len {cfg.max_seq_len}")
    head_dim = cfg.dim // cfg.n_heads
    inv_sqrt = 1.0 / math.sqrt(head_dim)

    h = ad.add(embeddings, ad.slice_rows(params["pos_embedding"], 0, seq_len))
    for layer in range(cfg.n_layers):
        p = f"layer{layer}."
        x = ad.scale_columns(ad.rms_normalize(h), params[p + "attn_norm"])
        q = ad.matmul(x, params[p + "attn_q"])
        k = ad.matmul(x, params[p + "attn_k"])
        v = ad.matmul(x, params[p + "attn_v"])
        head_outs = []
        for j in range(cfg.n_heads):
            lo, hi = j * head_dim, (j + 1) * head_dim
            qj = ad.slice_cols(q, lo, hi)
            kj = ad.slice_cols(k, lo, hi)
            vj = ad.slice_cols(v, lo, hi)
            scores = ad.scale(ad.matmul(qj, ad.transpose(kj)), inv_sqrt)
            weights = ad.softmax_rows(scores, causal=True)
            head_outs.append(ad.matmul(weights, vj))
        attn = ad.matmul(ad.concat_cols(head_outs), params[p + "attn_o"])
        h = ad.add(h, attn)

        x = ad.scale_columns(ad.rms_normalize(h), params[p + "mlp_norm"])
        gate = ad.silu(ad.matmul(x, params[p + "mlp_gate"]))
        up = ad.matmul(x, params[p + "mlp_up"])
        mlp = ad.matmul(ad.multiply(gate, up), params[p + "mlp_down"])
        h = ad.add(h, mlp)

    h = ad.scale_columns(ad.rms_normalize(h), params["final_norm"])
    return ad.matmul(h, ad.transpose(params["token_embedding"]))


def lm_loss(params: ModelParams, tokens: Sequence[int], embeddings_override: Optional[Tensor] = None) -> Tensor:
    """Next-token cross-entropy (mean over positions) on one sequence.

    When embeddings_override is given, the forward pass starts from it
    instead of the clean token embeddings (the perturbed-training path);
    targets are always the clean token ids shifted by one.
    """
    tokens = list(tokens)
    if len(tokens) < 2:
        raise DataError(f"need at least 2 tokens for a next-token loss, got {len(tokens)}")
    emb = embeddings_override if embeddings_override is not None else embed(params, tokens)
    if emb.data.shape[0] != len(tokens):
        raise ShapeError(
            f"override has {emb.data.shape[0]} rows for {len(tokens)} tokens"
        )
    logits = forward_from_embeddings(params, emb)
    return ad.cross_entropy_from_logits(ad.slice_rows(logits, 0, len(tokens) - 1), tokens[1:])


def generate_greedy(
    params: ModelParams,
    prompt: Sequence[int],
    max_new: int,
    eos_id: Optional[int] = None,
) -> list[int]:
    """Deterministic argmax decoding; returns only the newly generated ids.

    Stops at eos_id or after max_new tokens. np.argmax breaks ties by the
    lowest index, i.e. the lowest token id.
    """
    prompt = list(prompt)
    if not prompt:
        raise DataError("generation prompt must be non-empty")
    seq = list(prompt)
    out: list[int] = []
    max_ctx = params.config.max_seq_len
    with ad.no_grad():
        for _ in range(max_new):
            ctx = seq[-max_ctx:]
            logits = forward_from_embeddings(params, embed(params, ctx))
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            seq.append(nxt)
            if eos_id is not None and nxt == eos_id:
                break
    return out


# ---------------------------------------------------------------------------
# checkpoint format: fixed magic, little-endian header length, JSON header
# describing config + array layout, then raw C-order float64 bytes. Fully
# deterministic (no timestamps), so identical params give identical files.
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ModelParams) -> None:
    names = params.names()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "arrays": [
            {"name": n, "shape": list(params[n].data.shape), "dtype": "<f8"} for n in names
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DataError(f"not a checkpoint file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {header.get('format_version')}")
        config = ModelConfig.from_dict(header["config"])
        tensors: dict[str, Tensor] = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise DataError(f"checkpoint truncated while reading {spec['name']}")
            data = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
            tensors[spec["name"]] = ad.parameter(data)
    return ModelParams(config, tensors)
