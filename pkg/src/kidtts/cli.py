"""Command-line entry point binding the pipeline stages together.

Subcommands: gen-corpus, train, synth, eval, serve. Every run prints a
one-line reproducibility stanza (package version, seed, digest of the
effective configuration) before doing work; identical flags and seeds
produce byte-identical corpora, checkpoints, waveforms and reports.

Exit codes: 0 success, 2 usage, 3 configuration or data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .errors import ConfigurationError, DataError, NumericError, StageError


def _stanza(command: str, seed: int, config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    digest = hashlib.sha256(blob).hexdigest()[:12]
    return (f"kidtts {__version__} command={command} seed={seed} "
            f"config=sha256:{digest}")


def cmd_gen_corpus(args) -> None:
    from . import corpus

    if args.config is not None:
        try:
            payload = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read corpus config: {exc}") from exc
        cfg = corpus.config_from_json(payload)
    else:
        cfg = corpus.CorpusConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    print(_stanza("gen-corpus", cfg.seed, cfg.digest_payload()))
    items = corpus.generate_corpus(cfg, args.out)
    langs = sorted({i.language for i in items})
    print(f"wrote {len(items)} utterances ({', '.join(langs)}) to {args.out}")


def cmd_train(args) -> None:
    from . import checkpoint, train

    cfg = train.TrainConfig(
        epochs=args.epochs, seed=args.seed,
        language_filter=None if args.lang == "all" else args.lang)
    print(_stanza("train", cfg.seed, asdict(cfg)))

    def log(h):
        print(f"epoch {h['epoch']}: train_lm {h['train_lm_loss']:.4f} "
              f"val_lm {h['val_lm_loss']:.4f} val_flow {h['val_flow_loss']:.4f}")

    ckpt, _ = train.train_pipeline(args.manifest, cfg, log=log)
    checkpoint.save(ckpt, args.out)
    print(f"saved epoch {ckpt.epoch} checkpoint "
          f"(val loss {ckpt.val_loss:.4f}) to {args.out}")


def cmd_synth(args) -> None:
    from . import checkpoint, dsp, synth

    config = {"text": args.text, "language": args.lang,
              "ref": str(args.ref), "temperature": args.temperature,
              "top_k": args.top_k, "max_tokens": args.max_tokens}
    print(_stanza("synth", args.seed, config))
    ckpt = checkpoint.load(args.ckpt)
    ref = dsp.read_wav(args.ref)
    wave = synth.synthesize(ckpt, args.text, args.lang, ref, seed=args.seed,
                            temperature=args.temperature, top_k=args.top_k,
                            max_tokens=args.max_tokens)
    dsp.write_wav(args.out, wave)
    seconds = len(wave.samples) / wave.sample_rate_hz
    print(f"wrote {seconds:.2f}s of audio to {args.out}")


def cmd_eval(args) -> None:
    from . import checkpoint, evalkit

    config = {"manifest": str(args.manifest), "split": args.split,
              "ratings": None if args.ratings is None else str(args.ratings),
              "temperature": args.temperature}
    print(_stanza("eval", args.seed, config))
    ckpt = checkpoint.load(args.ckpt)
    ratings = None
    if args.ratings is not None:
        ratings = evalkit.read_ratings(args.ratings)
    report = evalkit.evaluate_system(
        ckpt, args.manifest, seed=args.seed, split=args.split,
        ratings=ratings, temperature=args.temperature)
    report.save(args.report)
    print(report.table)
    print(f"report written to {args.report}")


def cmd_serve(args) -> None:
    from . import ratesvc

    config = {"study": str(args.study), "ratings": str(args.ratings),
              "host": args.host, "port": args.port,
              "ui": None if args.ui is None else str(args.ui)}
    print(_stanza("serve", args.seed, config))
    ratesvc.serve(args.study, args.ratings, port=args.port, seed=args.seed,
                  host=args.host, ui_dir=args.ui)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kidtts",
        description="Multilingual child-voice TTS pipeline and listening tests")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="render a synthetic speech corpus")
    p.add_argument("--config", help="corpus config JSON (defaults built in)")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed (default 0)")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", help="train the token LM and mel decoder")
    p.add_argument("--manifest", required=True, help="corpus manifest.jsonl")
    p.add_argument("--lang", choices=["zh", "ma", "ta", "all"], default="all",
                   help="train on one language or the full corpus")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize one utterance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--lang", required=True, choices=["zh", "ma", "ta"])
    p.add_argument("--ref", required=True, help="reference speaker WAV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.8)
    p.add_argument("--top-k", type=int, default=16)
    p.add_argument("--max-tokens", type=int, default=512)
    p.add_argument("--out", required=True, help="output WAV path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="score a checkpoint against a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=["train", "val", "test"],
                   default="test")
    p.add_argument("--ratings", help="listening-test ratings JSONL")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.0,
                   help="0 decodes greedily (the default, comparable runs)")
    p.add_argument("--report", required=True, help="report output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the listening-test service")
    p.add_argument("--study", required=True, help="study manifest JSON")
    p.add_argument("--ratings", required=True, help="ratings JSONL to append")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ui", help="directory of static rater UI files")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigurationError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4 if isinstance(exc.cause, NumericError) else 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
