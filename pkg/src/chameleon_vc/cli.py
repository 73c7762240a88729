"""Command line entry point: ``chameleon-vc <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical divergence. Outputs default to ``$CHAMELEON_OUT/<name>``
(``./runs/<name>`` when the variable is unset).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from . import evaluation, frontend, mixer, pipeline, synthdata, tensorcore, trainer
from .convert import check_mixer, convert

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
OUT_ENV = "CHAMELEON_OUT"

log = logging.getLogger("chameleon_vc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def default_out(name):
    return Path(os.environ.get(OUT_ENV, "runs")) / name


def _resolve(args, overrides):
    return cfgmod.load(args.config, {k: v for k, v in overrides.items() if v is not None})


def _write_resolved(out_dir, values, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = cfgmod.dump(values)
    if extra:
        text += "".join(f"# {k} = {v}\n" for k, v in sorted(extra.items()))
    (out_dir / "config.resolved").write_text(text, encoding="utf-8")


def _load_corpus(path):
    path = Path(path)
    if not (path / "manifest.tsv").exists():
        raise FileNotFoundError(f"corpus manifest not found: {path / 'manifest.tsv'}")
    return synthdata.read_manifest(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    values = _resolve(args, {"data.speakers": args.speakers, "data.utts": args.utts, "data.seed": args.seed})
    out = Path(args.out or default_out("corpus"))
    manifest = synthdata.generate_corpus(values["data.speakers"], values["data.utts"], values["data.seed"], out)
    _write_resolved(out, cfgmod.section_values(values, "data"))
    print(f"wrote {len(manifest.entries)} utterances to {out}")


def cmd_train(args):
    values = _resolve(args, {
        "model.mode": args.mode, "model.layer_range": args.layer_range, "model.encoder": args.encoder,
        "model.seed": args.model_seed, "train.lambda_l2": args.lam, "train.steps": args.steps,
        "train.learning_rate": args.lr, "train.seed": args.seed, "train.batch_size": args.batch_size,
        "train.checkpoint_every": args.checkpoint_every,
    })
    manifest = _load_corpus(args.data)
    out = Path(args.out or default_out(f"train_{values['model.mode']}"))
    model = trainer.VCModel(cfgmod.model_config(values))
    tcfg = cfgmod.train_config(values)
    examples = trainer.prepare_examples(model, manifest)
    if args.resume:
        run = trainer.Trainer.resume(args.resume, examples, tcfg, out)
    else:
        run = trainer.Trainer(model, examples, tcfg, out)
    _write_resolved(out, cfgmod.section_values(values, "model", "train"))
    run.run()
    print(f"trained {run.step} steps; checkpoint {out / 'ckpt_final'}")


def cmd_convert(args):
    values = _resolve(args, {"model.mode": args.mode})
    model = trainer.load_checkpoint(args.ckpt)
    if args.mode is not None:
        check_mixer(model, trainer.ModelConfig(**{**cfgmod.section(values, "model"),
                                                  "mode": args.mode}).mixer())
    mel = convert(synthdata.read_wav(args.source), synthdata.read_wav(args.target), model)
    out = Path(args.out or default_out("convert") / "converted.mel.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    frontend.dump_matrix(out, mel.frames)
    _write_resolved(out.parent, {"convert.ckpt": str(args.ckpt), **cfgmod.section_values(values, "model")})
    print(f"wrote {mel.n_frames} frames to {out}")


def _named_checkpoints(specs):
    out = []
    for spec in specs:
        name, _, path = spec.rpartition("=")
        model = trainer.load_checkpoint(path)
        out.append((name or model.cfg.mode, model))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise UsageError(f"duplicate system names {names}; use name=path")
    return out


def cmd_eval(args):
    values = _resolve(args, {})
    manifest = _load_corpus(args.data)
    out = Path(args.out or default_out("eval"))
    out.mkdir(parents=True, exist_ok=True)
    evaluations, probe = [], None
    for name, model in _named_checkpoints(args.ckpt):
        examples = trainer.prepare_examples(model, manifest)
        if probe is None:
            probe = pipeline.train_symbol_probe(examples, reg=values["eval.probe_reg"],
                                                min_run=values["eval.min_run"])
        evaluations.append(pipeline.evaluate_model(name, model, examples, manifest, probe,
                                                   values["frontend.voicing_threshold"]))
    save_evaluations(out, evaluations)
    _write_resolved(out, {**cfgmod.section_values(values, "eval", "frontend"),
                          "eval.systems": ",".join(e.name for e in evaluations)})
    print(f"evaluated {len(evaluations)} systems into {out}")


def save_evaluations(out, evaluations):
    out = Path(out)
    metrics = sorted({m for e in evaluations for m in e.per_case})
    for metric in metrics:
        evaluation.write_scores(out / f"scores.{metric}.tsv",
                                {e.name: e.per_case[metric] for e in evaluations if metric in e.per_case})
    lines = [f"{e.name}.{k} = {v!r}" for e in evaluations for k, v in sorted(e.scalars.items())]
    (out / "scalars.kv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_evaluations(eval_dir):
    eval_dir = Path(eval_dir)
    files = sorted(eval_dir.glob("scores.*.tsv"))
    if not files:
        raise FileNotFoundError(f"no score files in {eval_dir}")
    by_name = {}
    for f in files:
        metric = f.name[len("scores."):-len(".tsv")]
        for system, cases in evaluation.read_scores(f).items():
            by_name.setdefault(system, evaluation.ModelEvaluation(system)).per_case[metric] = cases
    kv = eval_dir / "scalars.kv"
    if kv.exists():
        for line in kv.read_text(encoding="utf-8").splitlines():
            if line.strip():
                key, value = (x.strip() for x in line.split("=", 1))
                system, metric = key.rsplit(".", 1)
                by_name.setdefault(system, evaluation.ModelEvaluation(system)).scalars[metric] = _number(value)
    return [by_name[k] for k in sorted(by_name)]


def _number(text):
    try:
        return int(text)
    except ValueError:
        return float(text)


def cmd_report(args):
    evaluations = []
    for d in args.eval or []:
        evaluations += load_evaluations(d)
    for f in args.scores or []:
        metric = Path(f).stem
        for system, cases in evaluation.read_scores(f).items():
            match = [e for e in evaluations if e.name == system]
            target = match[0] if match else evaluation.ModelEvaluation(system)
            if not match:
                evaluations.append(target)
            target.per_case[metric] = cases
    if not evaluations:
        raise UsageError("report needs --eval and/or --scores inputs")
    report = evaluation.build_report(evaluations)
    out = Path(args.out or default_out("report"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
    (out / "report.kv").write_text(report.to_kv(), encoding="utf-8")
    _write_resolved(out, {"report.eval": ",".join(map(str, args.eval or [])),
                          "report.scores": ",".join(map(str, args.scores or []))})
    sys.stdout.write(report.to_table())


def cmd_weights_hist(args):
    model = trainer.load_checkpoint(args.ckpt)
    if model.weights is None:
        raise ValueError(f"checkpoint mode {model.cfg.mode!r} has no layer weights")
    table = mixer.format_histogram(mixer.weight_histogram(model.weights))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table, encoding="utf-8")
    sys.stdout.write(table)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="chameleon-vc", description="Layer-mixing voice conversion on synthetic corpora.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="config file of 'section.key = value' lines")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a synthetic corpus")
    sp.add_argument("--speakers", type=int)
    sp.add_argument("--utts", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")

    sp = add("train", cmd_train, "train a model on a corpus")
    sp.add_argument("--data", required=True, help="corpus directory")
    sp.add_argument("--mode", choices=mixer.MODES)
    sp.add_argument("--layer-range", dest="layer_range", help="first,last layer for fixed_average")
    sp.add_argument("--encoder", choices=("random", "structured"))
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--seed", type=int, help="batch sampling seed")
    sp.add_argument("--model-seed", dest="model_seed", type=int)
    sp.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    sp.add_argument("--resume", help="checkpoint directory to continue from")
    sp.add_argument("--out")

    sp = add("convert", cmd_convert, "convert one source utterance to a target voice")
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--mode", choices=mixer.MODES, help="expected mixer mode (checked against the checkpoint)")
    sp.add_argument("--out", help="text mel dump, one frame per line")

    sp = add("eval", cmd_eval, "convert zero-shot test pairs and score them")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True, action="append", help="[name=]checkpoint, repeatable")
    sp.add_argument("--out")

    sp = add("report", cmd_report, "tabulate evaluations with pairwise significance tests")
    sp.add_argument("--eval", action="append", help="eval output directory, repeatable")
    sp.add_argument("--scores", action="append", help="score file 'testcase<TAB>system<TAB>score'")
    sp.add_argument("--out")

    sp = add("weights-hist", cmd_weights_hist, "per-layer histogram of learned layer weights")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args.fn(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except tensorcore.NonFiniteError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
