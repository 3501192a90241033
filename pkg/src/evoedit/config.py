"""Run configuration file handling and provenance manifests.

A run config is one JSON document with these sections (all optional, all
keys validated):

  model    vocab_size, dim, n_layers, n_heads, mlp_hidden, max_seq_len, seed
  noise    alpha, resample_each_step
  fusion   beta, gamma, eta, k
  engine   epochs_per_edit, lr, optimizer, importance_final_step_only,
           importance_clean_pass, checkpoint_every
  eval     every, coeff, max_new
  pretrain steps, lr, target_loss, tokenizer (byte|bpe)
  corpus   n, seed
  seeds    list of run seeds (multi-seed sweeps run one edit pass per seed)

Every emitted CSV/JSON embeds the manifest hash so results can always be
traced back to the exact config, seeds, and corpus that produced them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .engine import EditRunConfig
from .errors import ConfigError
from .evaluation import EvalOptions
from .fusion import FusionCoefficients
from .model import ModelConfig
from .perturb import NoiseConfig

_SECTIONS = {"model", "noise", "fusion", "engine", "eval", "pretrain", "corpus", "seeds"}

DEFAULTS = {
    "model": {
        "vocab_size": 512,
        "dim": 64,
        "n_layers": 2,
        "n_heads": 4,
        "mlp_hidden": 128,
        "max_seq_len": 256,
        "seed": 0,
    },
    "noise": {"alpha": 12.0, "resample_each_step": True},
    "fusion": {"beta": 0.2, "gamma": 0.3, "eta": 0.5, "k": 20.0},
    "engine": {
        "epochs_per_edit": 30,
        "lr": 1e-3,
        "optimizer": "adam",
        "importance_final_step_only": False,
        "importance_clean_pass": False,
        "checkpoint_every": 0,
    },
    "eval": {"every": 1, "coeff": 0.1, "max_new": 32},
    "pretrain": {"steps": 40000, "lr": 2e-3, "target_loss": None, "tokenizer": "bpe"},
    "corpus": {"n": 50, "seed": 0},
    "seeds": [0],
}

METHODS = ("evoedit", "ft", "no_lpa", "no_kpf", "dpf")


def _merged(defaults: dict, overrides: dict, where: str) -> dict:
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(overrides)
    return out


@dataclass
class RunSettings:
    """Fully resolved configuration for one invocation."""

    raw: dict

    @classmethod
    def load(cls, path) -> "RunSettings":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunSettings":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(doc) - _SECTIONS
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        resolved: dict = {}
        for section in ("model", "noise", "fusion", "engine", "eval", "pretrain", "corpus"):
            resolved[section] = _merged(DEFAULTS[section], doc.get(section, {}), section)
        seeds = doc.get("seeds", DEFAULTS["seeds"])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        resolved["seeds"] = list(seeds)
        return cls(raw=resolved)

    @property
    def seeds(self) -> list[int]:
        return list(self.raw["seeds"])

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.raw["model"])

    def noise_config(self, seed: int = 0) -> NoiseConfig:
        n = self.raw["noise"]
        return NoiseConfig(alpha=float(n["alpha"]), rng_seed=seed,
                           resample_each_step=bool(n["resample_each_step"]))

    def fusion_coefficients(self) -> FusionCoefficients:
        f = self.raw["fusion"]
        return FusionCoefficients(beta=float(f["beta"]), gamma=float(f["gamma"]),
                                  eta=float(f["eta"]), k_percent=float(f["k"]))

    def eval_options(self) -> EvalOptions:
        e = self.raw["eval"]
        return EvalOptions(specificity_coeff=float(e["coeff"]), max_new=int(e["max_new"]))

    @property
    def eval_every(self) -> int:
        return int(self.raw["eval"]["every"])

    def edit_run_config(self, method: str, seed: int = 0) -> EditRunConfig:
        """Map a method flag onto the engine ablation switches."""
        if method not in METHODS:
            raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
        e = self.raw["engine"]
        return EditRunConfig(
            epochs_per_edit=int(e["epochs_per_edit"]),
            learning_rate=float(e["lr"]),
            optimizer=str(e["optimizer"]),
            noise=self.noise_config(seed),
            fusion=self.fusion_coefficients(),
            disable_lpa=method in ("ft", "no_lpa"),
            disable_kpf=method in ("ft", "no_kpf"),
            dpf_mode=method == "dpf",
            importance_final_step_only=bool(e["importance_final_step_only"]),
            importance_clean_pass=bool(e["importance_clean_pass"]),
        )


def build_manifest(settings: RunSettings, *, command: str, seeds: list[int],
                   corpus_hash: str = "", extra: dict | None = None) -> dict:
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "config": settings.raw,
        "seeds": seeds,
        "corpus_hash": corpus_hash,
    }
    if extra:
        manifest.update(extra)
    manifest["manifest_hash"] = manifest_hash(manifest)
    return manifest


def manifest_hash(manifest: dict) -> str:
    payload = {k: v for k, v in manifest.items() if k != "manifest_hash"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
