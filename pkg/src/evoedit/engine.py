"""Sequential edit-stream driver.

Each edit instance is fine-tuned into a fresh clone of the current model
with noise-augmented embeddings, component importance is accumulated from
the same gradients, and the trained weights are then selectively fused with
the pre-editing snapshot and the previous step's result. The fused model is
what the next edit builds on and what evaluation sees.

Ablation flags collapse the method onto its baselines: disable_lpa skips the
noise, disable_kpf skips importance and fusion entirely (plain sequential
fine-tuning keeps both off), and dpf_mode fuses every component regardless
of importance.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ComputationTape, backward
from .corpus import EditInstance, Tokenizer
from .errors import ConfigError, DataError, DivergenceError, EditStreamError
from .evaluation import EvalOptions, EvalReport, evaluate_efficacy, evaluate_specificity
from .fusion import FusionCoefficients, ImportanceLedger, fuse_parameters, select_top_k
from .model import ComponentId, ModelParams, embed, lm_loss, save_checkpoint, tokenize
from .perturb import NoiseConfig, sample_noise


@dataclass
class EditRunConfig:
    epochs_per_edit: int = 30
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    fusion: FusionCoefficients = field(default_factory=FusionCoefficients)
    disable_lpa: bool = False
    disable_kpf: bool = False
    dpf_mode: bool = False
    # importance accumulation variants: once at the last step instead of a
    # running mean, or from an extra noise-free pass
    importance_final_step_only: bool = False
    importance_clean_pass: bool = False
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs_per_edit < 1:
            raise ConfigError(f"epochs_per_edit must be >= 1, got {self.epochs_per_edit}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")


@dataclass
class StepLog:
    step: int
    instance_id: str
    n_tokens: int
    truncated: bool
    losses: list[float]
    loss_sum_final: float
    selected: list[str]
    duration_ms: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "instance_id": self.instance_id,
            "n_tokens": self.n_tokens,
            "truncated": self.truncated,
            "losses": self.losses,
            "loss_mean_final": self.losses[-1],
            "loss_sum_final": self.loss_sum_final,
            "selected": self.selected,
            "duration_ms": self.duration_ms,
        }


class OptimizerState:
    """Per-parameter Adam moments (or nothing, for sgd); fresh per edit."""

    def __init__(self, params: ModelParams, kind: str):
        self.kind = kind
        self.step = 0
        if kind == "adam":
            self.m = {n: np.zeros_like(params[n].data) for n in params.names()}
            self.v = {n: np.zeros_like(params[n].data) for n in params.names()}


def optimizer_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    opt_state: OptimizerState,
    cfg: EditRunConfig,
) -> None:
    """One in-place update on params from the given gradients."""
    for name in params.names():
        g = grads.get(name)
        if g is None:
            raise ConfigError(f"missing gradient for parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name!r}")
    lr = cfg.learning_rate
    opt_state.step += 1
    if opt_state.kind == "sgd":
        for name in params.names():
            params[name].data -= lr * grads[name]
        return
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    t = opt_state.step
    for name in params.names():
        g = grads[name]
        m = opt_state.m[name]
        v = opt_state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        params[name].data -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class EditState:
    """Checkpoint triple plus bookkeeping for one lifelong editing run.

    theta0 is frozen at construction; after edit t completes, theta_prev
    holds the fused result (the model the next edit starts from) and
    theta_live holds the trained-but-unfused weights of edit t.
    """

    theta0: ModelParams
    theta_prev: ModelParams
    theta_live: ModelParams
    step_index: int
    noise_rng: np.random.Generator
    eval_rng: np.random.Generator
    optimizer_state: Optional[OptimizerState] = None

    def current_model(self) -> ModelParams:
        return self.theta_prev


def init_edit_state(base: ModelParams, seed: int) -> EditState:
    noise_ss, eval_ss = np.random.SeedSequence(seed).spawn(2)
    return EditState(
        theta0=base.deep_clone(),
        theta_prev=base.deep_clone(),
        theta_live=base.deep_clone(),
        step_index=0,
        noise_rng=np.random.Generator(np.random.PCG64(noise_ss)),
        eval_rng=np.random.Generator(np.random.PCG64(eval_ss)),
    )


def _encode_edit(inst: EditInstance, tokenizer: Tokenizer, max_seq_len: int) -> tuple[list[int], bool]:
    ids = [tokenizer.bos_id] + tokenize(inst.edit_text, tokenizer) + [tokenizer.eos_id]
    truncated = False
    if len(ids) > max_seq_len:
        warnings.warn(
            f"edit {inst.id!r}: {len(ids)} tokens truncated to max_seq_len={max_seq_len}",
            stacklevel=3,
        )
        ids = ids[:max_seq_len]
        truncated = True
    if len(ids) < 2:
        raise DataError(f"edit {inst.id!r} tokenized to fewer than 2 tokens")
    return ids, truncated


def _component_grads(params: ModelParams, grads: dict[str, np.ndarray]) -> dict[ComponentId, np.ndarray]:
    return {cid: grads.get(cid.name) for cid in params.component_ids()}


def _clean_component_grads(params: ModelParams, ids: list[int]) -> dict[ComponentId, np.ndarray]:
    """Importance gradients from a noise-free pass (importance_clean_pass)."""
    params.zero_grads()
    with ComputationTape():
        loss = lm_loss(params, ids)
        if not np.isfinite(loss.data):
            raise DivergenceError("non-finite loss in importance clean pass")
        backward(loss)
    out = _component_grads(params, {n: params[n].grad for n in params.names()})
    params.zero_grads()
    return out


def apply_edit(
    state: EditState,
    inst: EditInstance,
    cfg: EditRunConfig,
    tokenizer: Tokenizer,
) -> tuple[EditState, StepLog, Optional[ImportanceLedger]]:
    """Fine-tune one instance into the model, then fuse; advances t by one.

    On divergence the state is left unchanged (the failed step's clone is
    discarded) and DivergenceError propagates to the caller.
    """
    started = time.perf_counter()
    ids, truncated = _encode_edit(inst, tokenizer, state.theta_prev.config.max_seq_len)

    live = state.theta_prev.deep_clone()
    live.zero_grads()
    opt = OptimizerState(live, cfg.optimizer)
    track_importance = not cfg.disable_kpf and not cfg.dpf_mode
    ledger = ImportanceLedger(live.component_ids()) if track_importance else None
    dim = live.config.dim
    noise_matrix: Optional[np.ndarray] = None
    losses: list[float] = []

    for step in range(cfg.epochs_per_edit):
        with ComputationTape():
            emb = embed(live, ids)
            if cfg.disable_lpa:
                train_emb = emb
            else:
                if cfg.noise.resample_each_step or noise_matrix is None:
                    noise_matrix = sample_noise(len(ids), dim, cfg.noise.alpha, state.noise_rng)
                train_emb = ad.add(emb, ad.constant(noise_matrix))
            loss = lm_loss(live, ids, embeddings_override=train_emb)
            if not np.isfinite(loss.data):
                raise DivergenceError(
                    f"edit {inst.id!r}: non-finite loss at optimizer step {step}"
                )
            backward(loss)
        losses.append(loss.item())
        grads = {n: live[n].grad for n in live.names()}
        live.zero_grads()
        if ledger is not None and (not cfg.importance_final_step_only or step == cfg.epochs_per_edit - 1):
            if cfg.importance_clean_pass and not cfg.disable_lpa:
                comp_grads = _clean_component_grads(live, ids)
            else:
                comp_grads = _component_grads(live, grads)
            ledger.accumulate(live, comp_grads)
        optimizer_step(live, grads, opt, cfg)

    if cfg.disable_kpf:
        fused = live.deep_clone()
        selected_names: list[str] = []
    else:
        if cfg.dpf_mode:
            selected = set(live.component_ids())
        else:
            selected = select_top_k(ledger, cfg.fusion.k_percent)
        fused = fuse_parameters(state.theta0, state.theta_prev, live, selected, cfg.fusion)
        selected_names = sorted(c.name for c in selected)

    state.theta_live = live
    state.theta_prev = fused
    state.step_index += 1
    state.optimizer_state = opt
    log = StepLog(
        step=state.step_index,
        instance_id=inst.id,
        n_tokens=len(ids),
        truncated=truncated,
        losses=losses,
        loss_sum_final=losses[-1] * (len(ids) - 1),
        selected=selected_names,
        duration_ms=(time.perf_counter() - started) * 1000.0,
    )
    return state, log, ledger


@dataclass
class RunSinks:
    """Optional incremental outputs so long streams are inspectable/resumable."""

    steps_jsonl: Optional[Path] = None
    ledger_csv: Optional[Path] = None
    checkpoint_dir: Optional[Path] = None
    checkpoint_every: int = 0

    def write_step(self, log: StepLog) -> None:
        if self.steps_jsonl is not None:
            with open(self.steps_jsonl, "a", encoding="utf-8") as f:
                f.write(json.dumps(log.to_dict(), sort_keys=True) + "\n")

    def write_ledger(self, step: int, ledger: Optional[ImportanceLedger]) -> None:
        if self.ledger_csv is None or ledger is None:
            return
        path = Path(self.ledger_csv)
        new_file = not path.exists()
        with open(path, "a", encoding="utf-8") as f:
            if new_file:
                f.write("step,component,layer,kind,score\n")
            for name, layer, kind, score in ledger.rows():
                f.write(f"{step},{name},{layer},{kind},{score!r}\n")

    def write_checkpoint(self, state: EditState) -> None:
        if self.checkpoint_dir is None or self.checkpoint_every < 1:
            return
        if state.step_index % self.checkpoint_every != 0:
            return
        out = Path(self.checkpoint_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / f"state_t{state.step_index:05d}.ckpt", state.theta_prev)


def run_stream(
    state: EditState,
    stream: Sequence[EditInstance],
    cfg: EditRunConfig,
    tokenizer: Tokenizer,
    eval_every: int = 1,
    eval_options: Optional[EvalOptions] = None,
    sinks: Optional[RunSinks] = None,
) -> tuple[EditState, list[EvalReport]]:
    """Apply the stream in order, evaluating every eval_every edits.

    Efficacy is scored on the instance just edited; specificity samples the
    instances edited before it (skipped while the history is empty). Errors
    from a failing edit propagate wrapped with the step index, leaving the
    state at the last completed edit.
    """
    if not stream:
        raise DataError("edit stream must be non-empty")
    if eval_every < 1:
        raise ConfigError(f"eval_every must be >= 1, got {eval_every}")
    opts = eval_options or EvalOptions()
    reports: list[EvalReport] = []
    for idx, inst in enumerate(stream):
        try:
            state, log, ledger = apply_edit(state, inst, cfg, tokenizer)
        except (DataError, DivergenceError) as e:
            raise EditStreamError(idx, str(e)) from e
        if sinks is not None:
            sinks.write_step(log)
            sinks.write_ledger(state.step_index, ledger)
            sinks.write_checkpoint(state)
        if state.step_index % eval_every == 0:
            snapshot = state.current_model()
            reports.append(
                evaluate_efficacy(snapshot, inst, tokenizer, max_new=opts.max_new, step=state.step_index)
            )
            history = stream[:idx]
            if history:
                reports.append(
                    evaluate_specificity(
                        snapshot,
                        history,
                        opts.specificity_coeff,
                        state.eval_rng,
                        tokenizer,
                        max_new=opts.max_new,
                        step=state.step_index,
                    )
                )
    return state, reports


def train_on_texts(
    params: ModelParams,
    texts: Sequence[str],
    tokenizer: Tokenizer,
    steps: int,
    learning_rate: float,
    seed: int,
    optimizer: str = "adam",
    target_loss: Optional[float] = None,
    log_every: int = 0,
) -> list[float]:
    """Plain next-token training over a text pool (the pretraining path).

    Picks one document per step at random and stops early once the running
    mean loss over the last 50 steps drops below target_loss.
    """
    if not texts:
        raise DataError("cannot train on an empty text pool")
    cfg = EditRunConfig(epochs_per_edit=1, learning_rate=learning_rate, optimizer=optimizer)
    opt = OptimizerState(params, optimizer)
    rng = np.random.default_rng(seed)
    max_len = params.config.max_seq_len
    losses: list[float] = []
    for step in range(steps):
        doc = texts[int(rng.integers(len(texts)))]
        ids = [tokenizer.bos_id] + tokenizer.encode(doc) + [tokenizer.eos_id]
        ids = ids[:max_len]
        params.zero_grads()
        with ComputationTape():
            loss = lm_loss(params, ids)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite pretraining loss at step {step}")
            backward(loss)
        losses.append(loss.item())
        optimizer_step(params, {n: params[n].grad for n in params.names()}, opt, cfg)
        params.zero_grads()
        if log_every and (step + 1) % log_every == 0:
            recent = losses[-log_every:]
            print(f"pretrain step {step + 1}/{steps} loss {sum(recent) / len(recent):.4f}")
        if target_loss is not None and len(losses) >= 50:
            if sum(losses[-50:]) / 50 < target_loss:
                break
    return losses
