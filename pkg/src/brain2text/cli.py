"""Command-line driver for the complete workflow.

    synth -> validate -> pretrain-fe -> align -> finetune -> decode / eval

plus `gradcheck`, which replays the finite-difference suite. Every command
reads one TOML config (--config) and writes everything under one directory
(--out); stage checkpoints land in <out>/checkpoint. Exit codes: 0 success,
1 invalid inputs (config, dataset, missing prerequisite), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

from .checkpoint import MANIFEST_NAME, read_extra
from .config import RunConfig, load_config
from .dataset import load_manifest, validate_dataset
from .feature_extractor import stacked_length
from .preprocessing import BlockStats, compute_block_stats
from .synthgen import generate_dataset
from .system import (
    AUG_EXTRA,
    BPE_EXTRA,
    CTC_BPE_EXTRA,
    SPEC_EXTRA,
    STATS_EXTRA,
    Pipeline,
    SystemSpec,
    build_models,
    load_system,
    make_ctc_target_fn,
    make_decoder_target_fn,
    system_extras,
    train_ctc_bpe,
    train_decoder_bpe,
)
from .textproc import BpeModel, default_inventory
from .training import (
    load_training_checkpoint,
    run_alignment_stage,
    run_finetune_stage,
    run_lm_warmup,
    run_pretrain_fe,
    split_namespace,
)
from .verification import TOLERANCE, run_all

LOCK_NAME = ".lock"
STATS_SIDECAR = "block_stats.json"

__all__ = ["main", "CliError"]


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


@contextmanager
def _locked(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(
            f"output directory is locked by another process: {lock} "
            "(delete the lock file if that process is gone)"
        ) from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _manifest_path(dataset: Path) -> Path:
    return dataset / "manifest.jsonl" if dataset.is_dir() else dataset


def _load_dataset(cfg: RunConfig):
    return load_manifest(_manifest_path(cfg.resolve_dataset()))


def _block_stats(manifest, manifest_path: Path) -> BlockStats:
    sidecar = manifest_path.parent / STATS_SIDECAR
    if sidecar.exists():
        return BlockStats.load(sidecar)
    stats = compute_block_stats(manifest)
    stats.save(sidecar)
    return stats


def _find_checkpoint(path: Path) -> Path:
    if (path / MANIFEST_NAME).exists():
        return path
    if (path / "checkpoint" / MANIFEST_NAME).exists():
        return path / "checkpoint"
    raise CliError(f"missing prerequisite checkpoint: {path}")


def _extra_text(ckpt: Path, name: str) -> str:
    return read_extra(ckpt, name).decode("utf-8")


def _load_stage(ckpt: Path, expect_stage: str) -> tuple[dict, dict]:
    arrays, state = load_training_checkpoint(ckpt)
    stage = state.get("stage")
    if stage != expect_stage:
        raise CliError(
            f"--from must point at a {expect_stage} checkpoint, found stage {stage!r}: {ckpt}"
        )
    if not state.get("complete", False):
        raise CliError(
            f"prerequisite checkpoint is incomplete (resume {stage} first): {ckpt}"
        )
    return arrays, state


def _last_metrics(ckpt: Path) -> dict:
    state = json.loads((ckpt / "state.json").read_text(encoding="utf-8"))
    metrics = state.get("metrics", [])
    return metrics[-1] if metrics else {}


def _test_trials(manifest, subset_name: str):
    trials = [t for t in manifest.trials if t.split == "test"]
    if subset_name != "all":
        trials = [t for t in trials if t.condition == subset_name]
    if not trials:
        raise CliError(f"no test trials in subset {subset_name!r}")
    return trials


def _check_dataset_matches(spec: SystemSpec, manifest, ckpt: Path) -> None:
    if spec.channels != manifest.channel_count:
        raise CliError(
            f"dataset has {manifest.channel_count} channels but the checkpoint at "
            f"{ckpt} was trained with {spec.channels}"
        )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.seed, args.precision)
    out = Path(args.out)
    with _locked(out):
        manifest_path = generate_dataset(cfg.synth, out)
        sidecar = out / STATS_SIDECAR
        sidecar.unlink(missing_ok=True)
    manifest = load_manifest(manifest_path)
    n_train = sum(1 for t in manifest.trials if t.split == "train")
    n_test = len(manifest.trials) - n_train
    print(f"wrote {len(manifest.trials)} trials (train={n_train}, test={n_test}) to {out}")
    return 0


def cmd_validate(args) -> int:
    cfg = load_config(args.config, args.seed, args.precision)
    manifest = _load_dataset(cfg)
    report = validate_dataset(manifest)
    print(report.to_json())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "validation.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


def cmd_pretrain_fe(args) -> int:
    cfg = load_config(args.config, args.seed, args.precision)
    manifest_path = _manifest_path(cfg.resolve_dataset())
    manifest = load_manifest(manifest_path)
    stats = _block_stats(manifest, manifest_path)

    ctc_bpe = None
    if cfg.ctc_mode == "bpe":
        ctc_bpe = train_ctc_bpe(manifest, cfg.ctc_bpe_vocab)
        target_fn, alphabet = make_ctc_target_fn("bpe", bpe=ctc_bpe)
    else:
        target_fn, alphabet = make_ctc_target_fn("phoneme", lexicon=cfg.lexicon())

    spec = SystemSpec(
        channels=manifest.channel_count,
        sessions=manifest.sessions(),
        alphabet_size=alphabet,
        ctc_mode=cfg.ctc_mode,
        precision=cfg.precision,
        seed=cfg.seed,
        extractor=cfg.extractor,
        decoder=None,
        session_fallback=cfg.session_fallback,
    )
    fe, _, _ = build_models(spec)
    stage_cfg = cfg.stage_config("pretrain_fe")
    extras = system_extras(spec, stats, cfg.aug, ctc_bpe=ctc_bpe, config_text=cfg.text)

    out = Path(args.out)
    ckpt = out / "checkpoint"
    with _locked(out):
        print(f"pretrain_fe: {len(manifest.trials)} trials, {stage_cfg.epochs} epochs")
        run_pretrain_fe(manifest, stats, cfg.aug, fe, target_fn, stage_cfg, ckpt,
                        resume=True, extras=extras)
    last = _last_metrics(ckpt)
    print(f"pretrain_fe complete: loss={last.get('loss')} per={last.get('per')}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_align(args) -> int:
    cfg = load_config(args.config, args.seed, args.precision)
    manifest = _load_dataset(cfg)
    out = Path(args.out)
    from_dir = Path(args.from_) if args.from_ else out.parent / "pretrain_fe"
    prev = _find_checkpoint(from_dir)
    arrays, _ = _load_stage(prev, "pretrain_fe")

    prev_spec = SystemSpec.from_json(_extra_text(prev, SPEC_EXTRA))
    if asdict(cfg.extractor) != asdict(prev_spec.extractor):
        raise CliError(
            f"feature_extractor in the config does not match the checkpoint at {prev}"
        )
    _check_dataset_matches(prev_spec, manifest, prev)
    stats = BlockStats.from_json(_extra_text(prev, STATS_EXTRA))
    ctc_bpe = None
    if (prev / CTC_BPE_EXTRA).exists():
        ctc_bpe = BpeModel.from_json(_extra_text(prev, CTC_BPE_EXTRA))

    bpe = train_decoder_bpe(manifest, cfg.decoder_bpe_vocab)
    spec = replace(prev_spec, decoder=cfg.decoder_config(bpe.vocab_size),
                   seed=cfg.seed, precision=cfg.precision)
    fe, bridge, decoder = build_models(spec)
    fe.load_state(split_namespace(arrays, "fe."))

    target_fn = make_decoder_target_fn(bpe, spec.decoder.eos_id)
    stage_cfg = cfg.stage_config("align")
    extras = system_extras(spec, stats, cfg.aug, bpe, ctc_bpe, cfg.text)

    ckpt = out / "checkpoint"
    with _locked(out):
        if cfg.lm_warmup_epochs > 0 and not (ckpt / MANIFEST_NAME).exists():
            # shape the decoder on text alone before it is frozen; a resumed
            # align run reloads the warmed weights from its own checkpoint
            plens = [stacked_length(t.T, spec.extractor.stack_k,
                                    spec.extractor.stack_s)
                     for t in manifest.trials if t.split == "train"]
            prange = (min(plens), max(plens))
            print(f"lm warmup: {cfg.lm_warmup_sentences} sentences, "
                  f"{cfg.lm_warmup_epochs} epochs, prefix range {prange}")
            loss = run_lm_warmup(decoder, bpe, manifest, cfg.lm_warmup_epochs,
                                 cfg.lm_warmup_batch, cfg.lm_warmup_lr,
                                 cfg.lm_warmup_sentences, cfg.seed,
                                 prefix_range=prange, lexicon=cfg.lexicon(),
                                 inventory=default_inventory())
            print(f"lm warmup complete: loss={loss:.4f}")
        print(f"align: {len(manifest.trials)} trials, {stage_cfg.epochs} epochs")
        run_alignment_stage(manifest, stats, cfg.aug, fe, bridge, decoder,
                            target_fn, stage_cfg, ckpt, resume=True, extras=extras)
    last = _last_metrics(ckpt)
    print(f"align complete: loss={last.get('loss')}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_config(args.config, args.seed, args.precision)
    manifest = _load_dataset(cfg)
    out = Path(args.out)
    from_dir = Path(args.from_) if args.from_ else out.parent / "align"
    prev = _find_checkpoint(from_dir)
    arrays, _ = _load_stage(prev, "align")

    prev_spec = SystemSpec.from_json(_extra_text(prev, SPEC_EXTRA))
    _check_dataset_matches(prev_spec, manifest, prev)
    stats = BlockStats.from_json(_extra_text(prev, STATS_EXTRA))
    bpe = BpeModel.from_json(_extra_text(prev, BPE_EXTRA))
    ctc_bpe = None
    if (prev / CTC_BPE_EXTRA).exists():
        ctc_bpe = BpeModel.from_json(_extra_text(prev, CTC_BPE_EXTRA))

    spec = replace(prev_spec, seed=cfg.seed, precision=cfg.precision)
    fe, bridge, decoder = build_models(spec)
    fe.load_state(split_namespace(arrays, "fe."))
    bridge.load_state(split_namespace(arrays, "bridge."))
    decoder.load_state(split_namespace(arrays, "decoder."))

    target_fn = make_decoder_target_fn(bpe, spec.decoder.eos_id)
    stage_cfg = cfg.stage_config("finetune")
    extras = system_extras(spec, stats, cfg.aug, bpe, ctc_bpe, cfg.text)

    ckpt = out / "checkpoint"
    with _locked(out):
        print(f"finetune: {len(manifest.trials)} trials, {stage_cfg.epochs} epochs, "
              f"lora_rank={stage_cfg.lora_rank}")
        run_finetune_stage(manifest, stats, cfg.aug, fe, bridge, decoder,
                           target_fn, stage_cfg, ckpt, resume=True, extras=extras)
    last = _last_metrics(ckpt)
    print(f"finetune complete: loss={last.get('loss')}")
    print(f"checkpoint: {ckpt}")
    return 0


def _pipeline_from(args, cfg: RunConfig, manifest) -> tuple[Pipeline, Path]:
    out = Path(args.out)
    from_dir = Path(args.from_) if args.from_ else out.parent / "finetune"
    prev = _find_checkpoint(from_dir)
    pipe = load_system(prev, manifest, cfg.generation)
    _check_dataset_matches(pipe.spec, manifest, prev)
    return pipe, prev


def cmd_decode(args) -> int:
    cfg = load_config(args.config, args.seed, args.precision)
    manifest = _load_dataset(cfg)
    pipe, prev = _pipeline_from(args, cfg, manifest)
    trials = _test_trials(manifest, args.subset)

    out = Path(args.out)
    with _locked(out):
        path = out / "hypotheses.jsonl"
        n_failed = 0
        with path.open("w", encoding="utf-8") as fh:
            for trial in trials:
                try:
                    text, result = pipe.decode_trial(trial)
                    rec = result.to_record(trial.trial_id, text)
                    rec["failed"] = False
                except Exception as e:  # noqa: BLE001 - keep decoding the rest
                    print(f"warning: decoding failed for trial {trial.trial_id}: {e}",
                          file=sys.stderr)
                    rec = {"trial_id": trial.trial_id, "hypothesis": "", "failed": True}
                    n_failed += 1
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"decoded {len(trials)} trials ({n_failed} failed) from {prev}")
    print(f"hypotheses: {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed, args.precision)
    manifest = _load_dataset(cfg)
    pipe, prev = _pipeline_from(args, cfg, manifest)
    trials = _test_trials(manifest, args.subset)

    out = Path(args.out)
    with _locked(out):
        report = pipe.evaluate(trials)
        report.save(out)
    print(f"evaluated {len(trials)} trials from {prev}")
    print(report.summary())
    print(f"report: {out / 'eval_report.json'}")
    return 0


def cmd_gradcheck(args) -> int:
    seed = 0
    if args.config:
        seed = load_config(args.config, args.seed, args.precision).seed
    elif args.seed is not None:
        seed = args.seed
    results = run_all(seed)
    for name, err in results.items():
        print(f"{name}: {err:.3e}")
    worst = max(results.values())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(
            json.dumps(results, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    if worst >= TOLERANCE:
        print(f"FAIL: max relative error {worst:.3e} >= {TOLERANCE}", file=sys.stderr)
        return 2
    print(f"all gradients verified: max relative error {worst:.3e} < {TOLERANCE}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, *, config_required: bool = True,
                out_required: bool = True, with_from: bool = False,
                with_subset: bool = False) -> None:
    p.add_argument("--config", required=config_required, help="TOML run configuration")
    p.add_argument("--out", required=out_required, help="output directory")
    if with_from:
        p.add_argument("--from", dest="from_", metavar="DIR", default=None,
                       help="prerequisite checkpoint directory (default: sibling stage dir)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--precision", choices=["f32", "f64"], default=None,
                   help="override the config precision")
    if with_subset:
        p.add_argument("--subset", choices=["vocal", "silent", "all"], default="all",
                       help="test-trial condition filter")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brain2text",
        description="Neural-signal-to-sentence decoding: data, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check a dataset and print its statistics")
    _add_common(p, out_required=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("pretrain-fe", help="CTC-pretrain the feature extractor")
    _add_common(p)
    p.set_defaults(func=cmd_pretrain_fe)

    p = sub.add_parser("align", help="train extractor + bridge against the frozen decoder")
    _add_common(p, with_from=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("finetune", help="train decoder (optionally LoRA) + bridge, extractor frozen")
    _add_common(p, with_from=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("decode", help="write hypotheses for the test split")
    _add_common(p, with_from=True, with_subset=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score the test split and write an evaluation report")
    _add_common(p, with_from=True, with_subset=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    _add_common(p, config_required=False, out_required=False)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - one honest line, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
