"""Command-line surface: synth, pretrain, edit, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
All outputs are deterministic for fixed inputs and seeds (step timings in
steps.jsonl are the one documented exception).
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import METHODS, RunSettings, build_manifest, read_manifest, write_manifest
from .corpus import (
    Tokenizer,
    build_tokenizer,
    corpus_file_hash,
    load_jsonl,
    save_jsonl,
    synth_corpus,
    synth_pretrain_texts,
    synth_tokenizer_texts,
)
from .engine import RunSinks, init_edit_state, run_stream, train_on_texts
from .errors import ConfigError, DataError, DivergenceError, EditStreamError, EvoEditError
from .evaluation import write_eval_csv
from .model import init_model, load_checkpoint, save_checkpoint
from .report import write_report

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


def cmd_synth(args) -> int:
    instances = synth_corpus(args.seed, args.n)
    save_jsonl(args.out, instances)
    print(f"wrote {len(instances)} edit instances to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    settings = RunSettings.load(args.config)
    pre = settings.raw["pretrain"]
    model_cfg = settings.model_config()
    corpus_seed = settings.raw["corpus"]["seed"]
    texts = synth_pretrain_texts(corpus_seed)

    if pre["tokenizer"] == "byte":
        tokenizer = build_tokenizer(texts, mode="byte")
    else:
        tokenizer = build_tokenizer(
            synth_tokenizer_texts(corpus_seed), mode="bpe", vocab_size=model_cfg.vocab_size
        )
    if tokenizer.vocab_size != model_cfg.vocab_size:
        raise ConfigError(
            f"model vocab_size {model_cfg.vocab_size} != tokenizer vocab {tokenizer.vocab_size} "
            f"(byte tokenizers need vocab_size {tokenizer.vocab_size})"
        )

    params = init_model(model_cfg)
    losses = train_on_texts(
        params,
        texts,
        tokenizer,
        steps=int(pre["steps"]),
        learning_rate=float(pre["lr"]),
        seed=model_cfg.seed,
        target_loss=pre["target_loss"],
        log_every=2000 if args.verbose else 0,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", params)
    tokenizer.save(out / "tokenizer.json")
    manifest = build_manifest(
        settings,
        command="pretrain",
        seeds=[model_cfg.seed],
        extra={
            "tokenizer_hash": tokenizer.content_hash(),
            "checkpoint_hash": params.content_hash(),
            "loss_first": losses[0],
            "loss_final_mean50": sum(losses[-50:]) / len(losses[-50:]),
            "steps_run": len(losses),
        },
    )
    write_manifest(out / "manifest.json", manifest)
    print(f"pretrained {len(losses)} steps: loss {losses[0]:.4f} -> "
          f"{manifest['loss_final_mean50']:.4f}; checkpoint in {out}")
    return EXIT_OK


def _summarize(reports) -> dict:
    eff = [r for r in reports if r.mode == "efficacy"]
    spec = [r for r in reports if r.mode == "specificity"]
    out: dict = {"n_efficacy_reports": len(eff), "n_specificity_reports": len(spec)}
    if eff:
        out["efficacy_mean_bleu"] = sum(r.average_bleu for r in eff) / len(eff)
        out["efficacy_mean_ppl"] = sum(r.average_ppl for r in eff) / len(eff)
        out["efficacy_final_bleu"] = eff[-1].average_bleu
        out["efficacy_final_ppl"] = eff[-1].average_ppl
    if spec:
        out["specificity_mean_bleu"] = sum(r.average_bleu for r in spec) / len(spec)
        out["specificity_mean_ppl"] = sum(r.average_ppl for r in spec) / len(spec)
        out["specificity_final_bleu"] = spec[-1].average_bleu
        out["specificity_final_ppl"] = spec[-1].average_ppl
    return out


def run_edit_single(settings: RunSettings, base_params, tokenizer, stream, method: str,
                    seed: int, out_dir: Path, corpus_hash: str) -> dict:
    """One seeded editing run; writes the full artifact set into out_dir."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = settings.edit_run_config(method, seed)
    state = init_edit_state(base_params, seed)
    checkpoint_every = int(settings.raw["engine"]["checkpoint_every"])
    sinks = RunSinks(
        steps_jsonl=out_dir / "steps.jsonl",
        ledger_csv=out_dir / "ledger.csv",
        checkpoint_dir=out_dir / "checkpoints" if checkpoint_every else None,
        checkpoint_every=checkpoint_every,
    )
    for stale in (sinks.steps_jsonl, sinks.ledger_csv):
        if stale.exists():
            stale.unlink()
    manifest = build_manifest(
        settings,
        command="edit",
        seeds=[seed],
        corpus_hash=corpus_hash,
        extra={"method": method, "seed": seed, "base_checkpoint_hash": base_params.content_hash()},
    )
    state, reports = run_stream(
        state,
        stream,
        cfg,
        tokenizer,
        eval_every=settings.eval_every,
        eval_options=settings.eval_options(),
        sinks=sinks,
    )
    write_eval_csv(reports, out_dir / "eval.csv", manifest_hash=manifest["manifest_hash"])
    summary = {
        "method": method,
        "seed": seed,
        "manifest_hash": manifest["manifest_hash"],
        "n_edits": state.step_index,
        **_summarize(reports),
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    write_manifest(out_dir / "manifest.json", manifest)
    save_checkpoint(out_dir / "final.ckpt", state.current_model())
    return summary


def cmd_edit(args) -> int:
    settings = RunSettings.load(args.config)
    seeds = [int(s) for s in args.seeds] if args.seeds else settings.seeds
    base = Path(args.base)
    tokenizer = Tokenizer.load(base / "tokenizer.json")
    base_params = load_checkpoint(base / "model.ckpt")
    if base_params.config.vocab_size != tokenizer.vocab_size:
        raise ConfigError(
            f"checkpoint vocab {base_params.config.vocab_size} incompatible with "
            f"tokenizer vocab {tokenizer.vocab_size}"
        )
    stream = load_jsonl(args.corpus)
    corpus_hash = corpus_file_hash(args.corpus)
    out = Path(args.out)

    if len(seeds) == 1:
        summary = run_edit_single(settings, base_params, tokenizer, stream, args.method,
                                  seeds[0], out, corpus_hash)
        print(f"edit run ({args.method}, seed {seeds[0]}): "
              f"efficacy {summary.get('efficacy_mean_bleu', float('nan')):.4f} BLEU; outputs in {out}")
        return EXIT_OK

    finals = []
    for seed in seeds:
        summary = run_edit_single(settings, base_params, tokenizer, stream, args.method,
                                  seed, out / f"seed_{seed}", corpus_hash)
        finals.append(summary)
        print(f"  seed {seed}: efficacy {summary.get('efficacy_mean_bleu', float('nan')):.4f} BLEU")
    keys = [k for k in finals[0] if isinstance(finals[0][k], (int, float)) and k != "seed"]
    sweep = {
        "method": args.method,
        "seeds": seeds,
        "per_seed": finals,
        "median": {k: statistics.median(f[k] for f in finals) for k in keys},
    }
    (out / "sweep_summary.json").write_text(
        json.dumps(sweep, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    print(f"sweep over {len(seeds)} seeds done; median efficacy "
          f"{sweep['median'].get('efficacy_mean_bleu', float('nan')):.4f} BLEU; outputs in {out}")
    return EXIT_OK


def _expand_run_dirs(paths) -> list[Path]:
    runs = []
    for p in paths:
        p = Path(p)
        if (p / "eval.csv").exists():
            runs.append(p)
            continue
        seed_dirs = sorted(d for d in p.glob("seed_*") if (d / "eval.csv").exists())
        if not seed_dirs:
            raise DataError(f"{p} contains no completed runs")
        runs.extend(seed_dirs)
    return runs


def cmd_report(args) -> int:
    runs = _expand_run_dirs(args.runs)
    hashes = sorted({read_manifest(r / "manifest.json").get("manifest_hash", "") for r in runs})
    combined = hashes[0] if len(hashes) == 1 else "+".join(h[:12] for h in hashes)
    written = write_report(runs, args.out, manifest_hash=combined)
    for name, path in sorted(written.items()):
        print(f"wrote {name}: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evoedit",
        description="Lifelong free-text knowledge editing on a toy decoder LM",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic counterfactual edit corpus (JSONL)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="train the base model on true-fact text")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("edit", help="run a lifelong editing stream against a base checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--base", required=True, help="pretrain output directory")
    p.add_argument("--corpus", required=True, help="edit-instance JSONL file")
    p.add_argument("--method", choices=METHODS, default="evoedit")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", nargs="*", help="override config seeds (one run per seed)")
    p.set_defaults(fn=cmd_edit)

    p = sub.add_parser("report", help="merge runs into tables and figures")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except EditStreamError as e:
        cause = e.__cause__
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE if isinstance(cause, DivergenceError) else EXIT_DATA
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
