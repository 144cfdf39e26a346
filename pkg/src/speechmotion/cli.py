"""Command-line entry point.

Subcommands: `pipeline run`, `train`, `synth`, `eval wer`, `eval stats`,
`verify`. Every run ends with one machine-readable JSON summary line on
stdout. Exit codes: 0 success, 1 invalid input/config, 2 numerical failure
(including failed verification). All default paths run offline on mock
backends, and --seed fully determines every stochastic output.
"""

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import torch

from . import datapipe, evaluation, net, synth, train, verify
from .errors import ConfigError, InvalidInputError, NumericalFailureError
from .features import AudioConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _summary(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _dataclass_from(section: dict, cls, label: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown {label} config keys: {sorted(unknown)}")
    return cls(**section)


def load_config(path):
    """JSON config with optional `model`, `train`, and `pipeline` sections.

    Unknown keys anywhere are rejected; relative paths inside the file are
    resolved against the file's directory.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    unknown = set(raw) - {"model", "train", "pipeline"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return raw, path.parent


def _resolve(base: Path, value):
    return str((base / value).resolve()) if value is not None else None


# ---- subcommands -------------------------------------------------------------


def cmd_pipeline_run(args) -> int:
    section, base = ({}, Path.cwd())
    if args.config:
        raw, base = load_config(args.config)
        section = raw.get("pipeline", {})
    if args.n_phrases is not None:
        section["n_phrases"] = args.n_phrases
    if args.voices is not None:
        section["voices"] = [v for v in args.voices.split(",") if v]
    if args.seed is not None:
        section["seed"] = args.seed
    out_dir = args.out or section.pop("out_dir", None)
    if out_dir is None:
        raise ConfigError("an output directory is required (--out or pipeline.out_dir)")
    if args.out is None:
        out_dir = _resolve(base, out_dir)
    config = _dataclass_from(section, datapipe.PipelineConfig, "pipeline")
    backends = datapipe.default_mock_backends(config.mocks)
    records, stats = datapipe.run_pipeline(config, backends, out_dir)
    _summary(
        {
            "command": "pipeline run",
            "status": "ok",
            "total": stats.total,
            "retained": stats.retained,
            "retained_hours": round(stats.retained_hours, 6),
            "counts": stats.counts,
            "manifest": str(Path(out_dir) / "manifest.jsonl"),
        }
    )
    return 0


def cmd_train(args) -> int:
    model_section, train_section, base = {}, {}, Path.cwd()
    if args.config:
        raw, base = load_config(args.config)
        model_section = raw.get("model", {})
        train_section = raw.get("train", {})
    for name in ("seed", "batch_size", "pretrain_steps", "finetune_steps", "learning_rate"):
        value = getattr(args, name)
        if value is not None:
            train_section[name] = value
    model_config = _dataclass_from(model_section, net.ModelConfig, "model")
    train_config = _dataclass_from(train_section, train.TrainConfig, "train")

    audio_config = AudioConfig(n_mels=model_config.n_mels)
    pretrain_corpus = []
    if args.pretrain_manifest:
        pretrain_corpus = train.load_corpus(args.pretrain_manifest, audio_config)
    finetune_corpus = []
    if args.finetune_manifest:
        finetune_corpus = train.load_corpus(
            args.finetune_manifest, audio_config, fixed_speaker=model_config.n_speakers - 1
        )

    torch.manual_seed(train_config.seed)
    model = net.SpeechMotionModel(model_config)
    both = list(pretrain_corpus) + list(finetune_corpus)
    if not both:
        raise ConfigError("no training data: provide at least one manifest")
    train.Standardizer.fit(both, model_config.n_buckets).apply(model)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = train.run_schedule(
        model, pretrain_corpus, finetune_corpus, train_config, checkpoint_dir=out_dir
    )
    ckpt = out_dir / "model.ckpt"
    net.save_checkpoint(model, ckpt, step=len(metrics))
    train.write_metrics(metrics, out_dir / "metrics.jsonl")
    _summary(
        {
            "command": "train",
            "status": "ok",
            "steps": len(metrics),
            "final_total": metrics[-1]["total"] if metrics else None,
            "checkpoint": str(ckpt),
            "parameters": model.parameter_count(),
        }
    )
    return 0


def cmd_synth(args) -> int:
    model, _ = net.load_checkpoint(args.ckpt)
    controls = synth.ProsodyControls(
        pitch_scale=args.pitch_scale, energy_scale=args.energy_scale
    )
    result = synth.synthesize(
        model,
        args.text,
        args.speaker,
        controls,
        seed_durations=args.seed,
        seed_decoder=args.seed + 1,
        nfe_joint=args.nfe,
        nfe_duration=args.nfe_dur,
        allow_untrained=args.allow_untrained,
    )
    paths = synth.export_result(result, args.out)
    _summary(
        {
            "command": "synth",
            "status": "ok",
            "frames": int(result.durations.sum()),
            "tokens": len(result.durations),
            "out": paths,
        }
    )
    return 0


def cmd_eval_wer(args) -> int:
    ref_lines = Path(args.ref).read_text(encoding="utf-8").splitlines()
    hyp_lines = Path(args.hyp).read_text(encoding="utf-8").splitlines()
    if len(ref_lines) != len(hyp_lines):
        raise InvalidInputError(
            f"line count mismatch: {len(ref_lines)} references vs {len(hyp_lines)} hypotheses"
        )
    total_edits = 0
    total_words = 0
    for ref, hyp in zip(ref_lines, hyp_lines):
        ref_words = datapipe.normalize_words(ref)
        hyp_words = datapipe.normalize_words(hyp)
        if not ref_words:
            raise InvalidInputError(f"empty reference line: {ref!r}")
        total_edits += round(evaluation.wer(ref_words, hyp_words) * len(ref_words))
        total_words += len(ref_words)
    rate = total_edits / total_words
    _summary(
        {
            "command": "eval wer",
            "status": "ok",
            "wer": rate,
            "wer_percent": round(100.0 * rate, 2),
            "lines": len(ref_lines),
            "ref_words": total_words,
        }
    )
    return 0


def _load_responses(path):
    """Line-structured responses: participant, screen, condition, label [, ...]."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def cmd_eval_stats(args) -> int:
    rows = [r for r in _load_responses(args.responses) if r.get("attention_pass", True)]
    if not rows:
        raise InvalidInputError("no usable responses after attention filtering")
    by_condition: dict = {}
    for row in rows:
        key = (row["condition"], row.get("scale", evaluation.SCALE_MOS))
        by_condition.setdefault(key, []).append(row)
    sets = {}
    for (condition, scale), group in sorted(by_condition.items()):
        if scale == evaluation.SCALE_APPROPRIATENESS:
            labels = [(r["label"], r["matched_side"]) for r in group]
        else:
            labels = [r["label"] for r in group]
        sets[condition] = evaluation.encode_responses(labels, scale, condition)
    print(evaluation.build_report(sets))
    comparisons = []
    names = list(sets)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            result = evaluation.pairwise_ttest(sets[a], sets[b])
            comparisons.append(
                {
                    "a": a,
                    "b": b,
                    "t": result.t,
                    "p": result.p,
                    "significant": result.significant,
                }
            )
            print(
                f"{a} vs {b}: t={result.t:.4f} p={result.p:.6f}"
                f" {'significant' if result.significant else 'n.s.'}"
            )
    summary = {
        "command": "eval stats",
        "status": "ok",
        "conditions": {
            name: evaluation.format_mean_ci(*evaluation.summarize(rs))
            for name, rs in sets.items()
        },
        "comparisons": comparisons,
    }
    _summary(summary)
    return 0


def cmd_verify(args) -> int:
    results = verify.run_all(quick=args.quick)
    for r in results:
        print(f"verify {r.name}: {'PASS' if r.passed else 'FAIL'} ({r.detail}, {r.seconds:.2f}s)")
    ok = all(r.passed for r in results)
    _summary(
        {
            "command": "verify",
            "status": "ok" if ok else "failed",
            "suites": {r.name: r.passed for r in results},
        }
    )
    return 0 if ok else 2


# ---- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="speechmotion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_pipe = sub.add_parser("pipeline", help="synthetic corpus pipeline")
    pipe_sub = p_pipe.add_subparsers(dest="pipeline_command", required=True)
    p_run = pipe_sub.add_parser("run", help="run the pipeline with mock backends")
    p_run.add_argument("--config", help="JSON config file with a `pipeline` section")
    p_run.add_argument("--out", help="output directory (audio/, motion/, manifest.jsonl)")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--n-phrases", type=int, default=None, dest="n_phrases")
    p_run.add_argument("--voices", default=None, help="comma-separated voice ids")
    p_run.set_defaults(func=cmd_pipeline_run)

    p_train = sub.add_parser("train", help="pretrain/fine-tune a model on manifests")
    p_train.add_argument("--config", help="JSON config with `model` and `train` sections")
    p_train.add_argument("--pretrain-manifest", dest="pretrain_manifest")
    p_train.add_argument("--finetune-manifest", dest="finetune_manifest")
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p_train.add_argument("--pretrain-steps", type=int, default=None, dest="pretrain_steps")
    p_train.add_argument("--finetune-steps", type=int, default=None, dest="finetune_steps")
    p_train.add_argument("--learning-rate", type=float, default=None, dest="learning_rate")
    p_train.set_defaults(func=cmd_train)

    p_synth = sub.add_parser("synth", help="synthesize mel + motion from text")
    p_synth.add_argument("--ckpt", required=True)
    p_synth.add_argument("--text", required=True)
    p_synth.add_argument("--speaker", type=int, default=0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--pitch-scale", type=float, default=1.0, dest="pitch_scale")
    p_synth.add_argument("--energy-scale", type=float, default=1.0, dest="energy_scale")
    p_synth.add_argument("--nfe", type=int, default=100)
    p_synth.add_argument("--nfe-dur", type=int, default=10, dest="nfe_dur")
    p_synth.add_argument("--allow-untrained", action="store_true", dest="allow_untrained")
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=cmd_synth)

    p_eval = sub.add_parser("eval", help="objective evaluation tools")
    eval_sub = p_eval.add_subparsers(dest="eval_command", required=True)
    p_wer = eval_sub.add_parser("wer", help="word error rate between two line files")
    p_wer.add_argument("--ref", required=True)
    p_wer.add_argument("--hyp", required=True)
    p_wer.set_defaults(func=cmd_eval_wer)
    p_stats = eval_sub.add_parser("stats", help="summaries and pairwise t-tests")
    p_stats.add_argument("--responses", required=True, help="JSON-lines response file")
    p_stats.set_defaults(func=cmd_eval_stats)

    p_verify = sub.add_parser("verify", help="run the oracle self-check suites")
    p_verify.add_argument("--quick", action="store_true", help="smaller case counts")
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (InvalidInputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalFailureError as exc:
        stage = f" [{exc.stage}]" if exc.stage else ""
        print(f"numerical failure{stage}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
