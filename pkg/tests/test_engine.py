import json

import numpy as np
import pytest

from evoedit.autodiff import ComputationTape, backward
from evoedit.config import RunSettings
from evoedit.corpus import Tokenizer, synth_corpus
from evoedit.engine import (
    EditRunConfig,
    OptimizerState,
    RunSinks,
    apply_edit,
    init_edit_state,
    optimizer_step,
    run_stream,
    train_on_texts,
)
from evoedit.errors import ConfigError, DataError, DivergenceError, EditStreamError
from evoedit.evaluation import EvalOptions, write_eval_csv
from evoedit.fusion import FusionCoefficients
from evoedit.model import ModelConfig, ModelParams, init_model, lm_loss
from evoedit.perturb import NoiseConfig

CFG = ModelConfig(vocab_size=259, dim=16, n_layers=2, n_heads=2, mlp_hidden=24,
                  max_seq_len=256, seed=1)
TOK = Tokenizer(mode="byte")


def _base():
    return init_model(CFG)


def _fast_cfg(**kw):
    defaults = dict(epochs_per_edit=3, learning_rate=1e-3)
    defaults.update(kw)
    return EditRunConfig(**defaults)


def _stream(n, seed=50):
    return synth_corpus(seed=seed, n=n)


class TestOptimizer:
    def test_sgd_arithmetic(self):
        params = _base()
        name = "final_norm"
        grads = {n: np.zeros_like(params[n].data) for n in params.names()}
        params[name].data[:] = 1.0
        grads[name][:] = 2.0
        opt = OptimizerState(params, "sgd")
        optimizer_step(params, grads, opt, _fast_cfg(optimizer="sgd", learning_rate=0.1))
        assert np.allclose(params[name].data, 0.8)

    def test_adam_first_step_magnitude_is_lr(self):
        params = _base()
        grads = {n: np.full_like(params[n].data, 0.37) for n in params.names()}
        before = params["final_norm"].data.copy()
        opt = OptimizerState(params, "adam")
        cfg = _fast_cfg(learning_rate=1e-2)
        optimizer_step(params, grads, opt, cfg)
        delta = np.abs(params["final_norm"].data - before)
        assert np.allclose(delta, cfg.learning_rate, rtol=1e-6)

    def test_convex_quadratic_descent(self):
        # minimize sum((x-3)^2) through the adam path: loss strictly decreases
        params = _base()
        target = 3.0
        opt = OptimizerState(params, "adam")
        cfg = _fast_cfg(learning_rate=0.05)
        losses = []
        for _ in range(20):
            grads = {n: np.zeros_like(params[n].data) for n in params.names()}
            x = params["final_norm"].data
            losses.append(float(np.sum((x - target) ** 2)))
            grads["final_norm"] = 2.0 * (x - target)
            optimizer_step(params, grads, opt, cfg)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_non_finite_gradient_rejected(self):
        params = _base()
        grads = {n: np.zeros_like(params[n].data) for n in params.names()}
        grads["final_norm"][0] = np.nan
        with pytest.raises(DivergenceError, match="final_norm"):
            optimizer_step(params, grads, OptimizerState(params, "adam"), _fast_cfg())


class TestApplyEdit:
    def test_advances_step_and_freezes_theta0(self):
        state = init_edit_state(_base(), seed=0)
        h0 = state.theta0.content_hash()
        inst = _stream(1)[0]
        state, log, ledger = apply_edit(state, inst, _fast_cfg(), TOK)
        assert state.step_index == 1
        assert state.theta0.content_hash() == h0
        assert log.instance_id == inst.id
        assert len(log.losses) == 3
        assert ledger is not None and ledger.step_count == 3

    def test_eta_one_fusion_keeps_trained_weights(self):
        state = init_edit_state(_base(), seed=0)
        cfg = _fast_cfg(fusion=FusionCoefficients(0.0, 0.0, 1.0, k_percent=100.0))
        state, _, _ = apply_edit(state, _stream(1)[0], cfg, TOK)
        for name in state.theta_live.names():
            assert np.array_equal(state.theta_prev[name].data, state.theta_live[name].data)

    def test_disable_kpf_sets_prev_to_live(self):
        state = init_edit_state(_base(), seed=0)
        state, log, ledger = apply_edit(state, _stream(1)[0], _fast_cfg(disable_kpf=True), TOK)
        assert ledger is None
        assert log.selected == []
        for name in state.theta_live.names():
            assert np.array_equal(state.theta_prev[name].data, state.theta_live[name].data)

    def test_dpf_selects_everything(self):
        state = init_edit_state(_base(), seed=0)
        state, log, _ = apply_edit(state, _stream(1)[0], _fast_cfg(dpf_mode=True), TOK)
        assert len(log.selected) == 7 * CFG.n_layers

    def test_ablation_collapse_matches_plain_fine_tuning(self):
        # disable_lpa + disable_kpf must walk bitwise the same trajectory as
        # the ft baseline built from the method flag mapping
        inst = _stream(1)[0]
        settings = RunSettings.from_dict({"engine": {"epochs_per_edit": 3, "lr": 1e-3}})
        ft_cfg = settings.edit_run_config("ft", seed=9)
        manual = settings.edit_run_config("evoedit", seed=9)
        manual.disable_lpa = True
        manual.disable_kpf = True
        assert manual == ft_cfg
        s1 = init_edit_state(_base(), seed=9)
        s2 = init_edit_state(_base(), seed=9)
        s1, l1, _ = apply_edit(s1, inst, ft_cfg, TOK)
        s2, l2, _ = apply_edit(s2, inst, manual, TOK)
        assert l1.losses == l2.losses
        assert s1.theta_prev.content_hash() == s2.theta_prev.content_hash()

    def test_alpha_zero_bit_identical_to_lpa_disabled(self):
        inst = _stream(1)[0]
        zero_noise = _fast_cfg(noise=NoiseConfig(alpha=0.0))
        disabled = _fast_cfg(disable_lpa=True)
        s1 = init_edit_state(_base(), seed=4)
        s2 = init_edit_state(_base(), seed=4)
        s1, l1, _ = apply_edit(s1, inst, zero_noise, TOK)
        s2, l2, _ = apply_edit(s2, inst, disabled, TOK)
        assert l1.losses == l2.losses
        assert s1.theta_prev.content_hash() == s2.theta_prev.content_hash()

    def test_memorizes_edit_counterfactual(self):
        from evoedit.evaluation import generate_answer

        inst = _stream(1, seed=60)[0]
        cfg = _fast_cfg(epochs_per_edit=120, learning_rate=3e-3, disable_kpf=True,
                        disable_lpa=True)
        state = init_edit_state(init_model(ModelConfig(
            vocab_size=259, dim=32, n_layers=2, n_heads=4, mlp_hidden=64,
            max_seq_len=256, seed=2)), seed=0)
        state, log, _ = apply_edit(state, inst, cfg, TOK)
        assert log.losses[-1] < 0.2
        cloze = inst.queries_for(list(inst.queries)[0].rank)[0]
        answer = generate_answer(state.current_model(), TOK, cloze.question, 48)
        target = inst.metadata["counterfactual_object"].lower()
        assert target in answer.lower()

    def test_overlength_edit_truncated_with_warning(self):
        state = init_edit_state(_base(), seed=0)
        inst = _stream(1)[0]
        inst.edit_text = inst.edit_text + " padding" * 40
        with pytest.warns(UserWarning, match="truncated"):
            state, log, _ = apply_edit(state, inst, _fast_cfg(), TOK)
        assert log.truncated
        assert log.n_tokens == CFG.max_seq_len

    def test_divergence_leaves_state_unchanged(self):
        state = init_edit_state(_base(), seed=0)
        state.theta_prev["token_embedding"].data[:] = 1e300  # forces overflow
        before_prev = state.theta_prev.content_hash()
        before_t = state.step_index
        with pytest.raises(DivergenceError):
            apply_edit(state, _stream(1)[0], _fast_cfg(), TOK)
        assert state.theta_prev.content_hash() == before_prev
        assert state.step_index == before_t

    def test_parameter_count_invariant(self):
        state = init_edit_state(_base(), seed=0)
        n0 = state.theta_prev.parameter_count()
        for inst in _stream(3):
            state, _, _ = apply_edit(state, inst, _fast_cfg(), TOK)
        assert state.theta_prev.parameter_count() == n0
        assert state.theta_live.parameter_count() == n0


class TestRunStream:
    def test_single_instance_stream(self, tmp_path):
        sinks = RunSinks(steps_jsonl=tmp_path / "steps.jsonl", ledger_csv=tmp_path / "ledger.csv")
        state = init_edit_state(_base(), seed=0)
        state, reports = run_stream(state, _stream(1), _fast_cfg(), TOK, eval_every=1,
                                    eval_options=EvalOptions(max_new=2), sinks=sinks)
        assert state.step_index == 1
        logs = [json.loads(l) for l in (tmp_path / "steps.jsonl").read_text().splitlines()]
        assert len(logs) == 1 and logs[0]["step"] == 1
        # one efficacy report, no specificity (history empty at t=1)
        assert [r.mode for r in reports] == ["efficacy"]
        ledger_lines = (tmp_path / "ledger.csv").read_text().splitlines()
        assert ledger_lines[0] == "step,component,layer,kind,score"
        assert len(ledger_lines) == 1 + 7 * CFG.n_layers

    def test_determinism_byte_identical_csv(self, tmp_path):
        outs = []
        for run in range(2):
            state = init_edit_state(_base(), seed=33)
            state, reports = run_stream(state, _stream(4), _fast_cfg(), TOK, eval_every=2,
                                        eval_options=EvalOptions(max_new=3))
            path = tmp_path / f"eval_{run}.csv"
            write_eval_csv(reports, path, manifest_hash="same")
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_error_carries_step_index(self):
        stream = _stream(3)
        stream[1].edit_text = ""  # bypasses schema validation: poisoned entry
        state = init_edit_state(_base(), seed=0)
        with pytest.raises(EditStreamError) as err:
            run_stream(state, stream, _fast_cfg(), TOK, eval_every=10)
        assert err.value.step_index == 1
        assert state.step_index == 1  # first edit committed, second aborted

    def test_sequential_sensitivity(self):
        # removing instance j changes the state after position j
        full = _stream(3, seed=70)
        state_a = init_edit_state(_base(), seed=5)
        state_a, _ = run_stream(state_a, full, _fast_cfg(), TOK, eval_every=10)
        state_b = init_edit_state(_base(), seed=5)
        state_b, _ = run_stream(state_b, [full[0], full[2]], _fast_cfg(), TOK, eval_every=10)
        assert state_a.theta_prev.content_hash() != state_b.theta_prev.content_hash()

    def test_empty_stream_rejected(self):
        with pytest.raises(DataError):
            run_stream(init_edit_state(_base(), seed=0), [], _fast_cfg(), TOK)

    def test_checkpoint_cadence(self, tmp_path):
        sinks = RunSinks(checkpoint_dir=tmp_path / "ck", checkpoint_every=2)
        state = init_edit_state(_base(), seed=0)
        run_stream(state, _stream(4), _fast_cfg(), TOK, eval_every=10, sinks=sinks)
        assert sorted(p.name for p in (tmp_path / "ck").glob("*.ckpt")) == [
            "state_t00002.ckpt", "state_t00004.ckpt",
        ]


class TestTrainOnTexts:
    def test_loss_decreases(self):
        params = _base()
        losses = train_on_texts(params, ["the quick brown fox jumps over the lazy dog"],
                                TOK, steps=60, learning_rate=3e-3, seed=0)
        assert np.mean(losses[-10:]) < losses[0]

    def test_target_loss_stops_early(self):
        params = _base()
        losses = train_on_texts(params, ["aaaa bbbb"], TOK, steps=500,
                                learning_rate=5e-3, seed=0, target_loss=10.0)
        assert len(losses) < 500
