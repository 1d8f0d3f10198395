"""``xytok`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .audio import AudioFormatError, wav_read, wav_write
from .config import ConfigError, RunConfig, dump_run_config, load_run_config

log = logging.getLogger("xytok")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p, config_required: bool):
    p.add_argument("--config", required=config_required, help="INI run configuration")
    p.add_argument("--seed", type=int, help="run seed (overrides [run] seed)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a single config key; may repeat")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xytok", description="Desk-scale dual-channel speech codec.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write the synthetic corpus and manifests")
    _common(p, True)
    p.add_argument("--out", help="corpus directory (overrides [data] root)")

    p = sub.add_parser("pretrain", help="multi-task pre-training")
    _common(p, True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--checkpoint", help="resume from this training checkpoint")
    p.add_argument("--steps", type=int, help="total steps (overrides [pretrain] steps)")

    p = sub.add_parser("posttrain", help="GAN post-training of the acoustic decoder")
    _common(p, True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--checkpoint", required=True, help="pre-trained or partially post-trained checkpoint")
    p.add_argument("--steps", type=int, help="total steps (overrides [posttrain] steps)")

    p = sub.add_parser("encode", help="WAV -> token file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="16-bit PCM WAV")
    p.add_argument("--output", required=True, help="token file")

    p = sub.add_parser("decode", help="token file -> WAV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="token file")
    p.add_argument("--output", required=True, help="WAV path")

    p = sub.add_parser("probe", help="train an ASR probe on quantized embeddings")
    _common(p, True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="directory for probe.json")
    p.add_argument("--steps", type=int, help="probe steps (overrides [probe] steps)")

    p = sub.add_parser("eval", help="reconstruction metrics plus probe WER on the test split")
    _common(p, True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="directory for report.json and report.csv")
    p.add_argument("--steps", type=int, help="probe steps (overrides [probe] steps)")
    p.add_argument("--no-probe", action="store_true", help="skip probe training; wer is null")

    p = sub.add_parser("gradcheck", help="finite-difference suite")
    p.add_argument("--out", help="directory for gradcheck.json")
    return parser


def _config(args, steps_section: str | None = None) -> RunConfig:
    cfg = load_run_config(args.config, args.set, args.seed)
    if steps_section and getattr(args, "steps", None) is not None:
        if args.steps < 1:
            raise ConfigError("--steps must be positive")
        cfg = replace(cfg, **{steps_section: replace(getattr(cfg, steps_section), steps=args.steps)})
    return cfg


def _manifest(cfg: RunConfig, split: str) -> Path:
    path = Path(cfg.data.root) / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} not found; run gen-data first")
    return path


def _write_run_info(out: Path, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_run_config(cfg))
    (out / "run.json").write_text(json.dumps({"command": command, "config_hash": cfg.hash(),
                                              "seed": cfg.seed}, sort_keys=True) + "\n")


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


# --------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    from .synth import gen_corpus

    cfg = _config(args)
    if args.out:
        cfg = replace(cfg, data=replace(cfg.data, root=args.out))
    d = cfg.data
    manifests = gen_corpus(d.n_train, d.n_dev, d.n_test, d.seed, d.root, d.sample_rate, d.n_speakers)
    _emit({"config_hash": cfg.hash(), "manifests": {k: str(v) for k, v in manifests.items()}})
    return EXIT_OK


def _on_record(rec: dict) -> None:
    log.info("step %d %s", rec["step"], json.dumps(rec["losses"], sort_keys=True))


def cmd_pretrain(args) -> int:
    from .model import CodecModel
    from .training import Corpus, resume_pretrain, run_pretrain

    cfg = _config(args, "pretrain")
    out = Path(args.out)
    _write_run_info(out, cfg, "pretrain")
    corpus = Corpus.from_manifest(_manifest(cfg, "train"), cfg.data.sample_rate)
    if args.checkpoint:
        model, records = resume_pretrain(args.checkpoint, corpus, cfg.pretrain, out, _on_record)
    else:
        model = CodecModel(cfg.codec_config())
        records = run_pretrain(model, corpus, cfg.pretrain, out, _on_record)
    last = records[-1] if records else {}
    _emit({"config_hash": cfg.hash(), "checkpoint": str(out / "checkpoint.xyck"),
           "step": last.get("step"), "losses": last.get("losses")})
    return EXIT_OK


def cmd_posttrain(args) -> int:
    from .training import Corpus, load_training_checkpoint, new_posttrain_state, run_posttrain

    cfg = _config(args, "posttrain")
    out = Path(args.out)
    _write_run_info(out, cfg, "posttrain")
    model, state, _ = load_training_checkpoint(args.checkpoint, cfg_steps=cfg.posttrain.steps,
                                               lr=cfg.posttrain.gen_lr)
    if state.stage != "posttrain":
        state = new_posttrain_state(model, cfg.posttrain)
    corpus = Corpus.from_manifest(_manifest(cfg, "train"), cfg.data.sample_rate)
    records = run_posttrain(model, corpus, cfg.posttrain, out, _on_record, state=state)
    last = records[-1] if records else {}
    _emit({"config_hash": cfg.hash(), "checkpoint": str(out / "checkpoint.xyck"),
           "step": last.get("step"), "losses": last.get("losses")})
    return EXIT_OK


def _runner(path):
    from .inference import CodecRunner
    from .training import load_model

    model, _, _ = load_model(path)
    return CodecRunner(model)


def cmd_encode(args) -> int:
    runner = _runner(args.checkpoint)
    wav = wav_read(args.input, runner.sample_rate)
    tokens = runner.encode(wav)
    tokens.save(args.output)
    _emit({"frames": tokens.num_frames, "layers": tokens.num_layers, "bitrate": runner.bitrate,
           "output": args.output})
    return EXIT_OK


def cmd_decode(args) -> int:
    from .rvq import TokenSequence

    runner = _runner(args.checkpoint)
    tokens = TokenSequence.load(args.input)
    wav = runner.decode(tokens)
    wav_write(args.output, wav)
    _emit({"samples": len(wav), "seconds": wav.duration, "output": args.output})
    return EXIT_OK


def _probe_rows(cfg):
    from .synth import read_manifest

    return read_manifest(_manifest(cfg, "train")), read_manifest(_manifest(cfg, "dev"))


def cmd_probe(args) -> int:
    from .probing import codec_features, probe_train

    cfg = _config(args, "probe")
    runner = _runner(args.checkpoint)
    train_rows, dev_rows = _probe_rows(cfg)
    sr = runner.sample_rate
    _, dev_wer, hyps = probe_train(codec_features(runner, train_rows, sr), [r["text"] for r in train_rows],
                                   codec_features(runner, dev_rows, sr), [r["text"] for r in dev_rows],
                                   cfg.probe)
    summary = {"config_hash": cfg.hash(), "dev_wer": dev_wer, "n_train": len(train_rows), "n_dev": len(dev_rows)}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = dict(summary, hypotheses=hyps, references=[r["text"] for r in dev_rows])
        (out / "probe.json").write_text(json.dumps(payload, sort_keys=True) + "\n")
    _emit(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .probing import evaluate_codec

    cfg = _config(args, "probe")
    runner = _runner(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probe = None if args.no_probe else (_manifest(cfg, "train"), _manifest(cfg, "dev"))
    report = evaluate_codec(runner, _manifest(cfg, "test"), probe, cfg.probe, csv_path=out / "report.csv")
    (out / "report.json").write_text(report.to_json() + "\n")
    _emit(json.loads(report.to_json()) | {"config_hash": cfg.hash()})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results, seconds = run_suite()
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:40s} max_rel_err={r.max_rel_err:.3e} tol={r.tol:.0e}")
    print(f"{sum(r.ok for r in results)}/{len(results)} passed in {seconds:.1f}s")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = [{"name": r.name, "max_rel_err": r.max_rel_err, "tol": r.tol, "ok": r.ok} for r in results]
        (out / "gradcheck.json").write_text(json.dumps(payload, indent=1) + "\n")
    return EXIT_OK if all(r.ok for r in results) else EXIT_RUNTIME


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "posttrain": cmd_posttrain,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "probe": cmd_probe,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def _setup_logging() -> None:
    level = os.environ.get("XY_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"XY_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv: list[str] | None = None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_VALIDATION
    except ConfigError as e:
        print(f"xytok: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_VALIDATION
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, AudioFormatError, FileNotFoundError, ValueError) as e:
        print(f"xytok {args.command}: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        log.debug("runtime failure", exc_info=True)
        print(f"xytok {args.command}: runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
