"""Command-line entry points: synth-data, train, decode, eval, report.

Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import experiment as X
from . import speaker_eval as se
from . import trainer as tr
from .adversary import AdversaryConfig
from .attention import AttentionConfig
from .autodiff import NonFiniteError
from .data import CorpusConfig, DataError, SplitScheme, generate_synthetic_corpus, make_splits
from .data import read_corpus, write_corpus
from .encoder import EncoderConfig

log = logging.getLogger("spkadv")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MISSING = "\u2014"  # em dash, the blank-cell marker of the report

SECTIONS = {
    "corpus": CorpusConfig,
    "splits": SplitScheme,
    "encoder": EncoderConfig,
    "attention": AttentionConfig,
    "adversary": AdversaryConfig,
    "train": tr.TrainConfig,
    "eval": X.EvalConfig,
    "embedding": se.EmbeddingConfig,
}
# fields owned by the CLI itself rather than the config file
_RESERVED = {"seed", "stage", "embedding"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# --------------------------------------------------------------------------
# config


def _keys(cls) -> dict:
    return {f.name: f for f in fields(cls) if f.name not in _RESERVED}


def _parse_value(section: str, key: str, default, text: str):
    try:
        if isinstance(default, bool):
            return text.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, tuple):
            kind = type(default[0]) if default else int
            return tuple(kind(p) for p in text.split(",") if p.strip())
        if isinstance(default, dict):  # train.epochs, in stage order
            vals = [int(p) for p in text.split(",")]
            if len(vals) != len(tr.STAGES):
                raise ValueError(f"expected {len(tr.STAGES)} comma-separated epoch counts")
            return dict(zip(tr.STAGES, vals))
        return type(default)(text)
    except ValueError as exc:
        raise UsageError(f"config {section}.{key}: cannot parse {text!r} ({exc})") from None


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, dict):
        return ",".join(str(v[s]) for s in tr.STAGES)
    return str(v)


class RunConfig:
    """Every section of the INI file as a dataclass instance plus the run seed."""

    def __init__(self, seed: int = 0, **sections):
        self.seed = seed
        self.sections = {name: sections.get(name) or cls() for name, cls in SECTIONS.items()}

    @classmethod
    def load(cls, path: str | None, overrides=()) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        if path:
            if not Path(path).exists():
                raise DataError(f"config file {path} not found")
            parser.read(path, encoding="utf-8")
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise UsageError(f"--set expects section.key=value, got {item!r}")
            k, v = item.split("=", 1)
            sec, key = k.split(".", 1)
            if not parser.has_section(sec):
                parser.add_section(sec)
            parser.set(sec, key, v)
        seed = 0
        values = {}
        for sec in parser.sections():
            if sec == "run":
                for key, text in parser.items(sec):
                    if key != "seed":
                        raise UsageError(f"unknown config key run.{key}")
                    seed = int(text)
                continue
            if sec not in SECTIONS:
                raise UsageError(f"unknown config section [{sec}]")
            known = _keys(SECTIONS[sec])
            defaults = SECTIONS[sec]()
            kw = {}
            for key, text in parser.items(sec):
                if key not in known:
                    raise UsageError(f"unknown config key {sec}.{key}")
                kw[key] = _parse_value(sec, key, getattr(defaults, key), text)
            try:
                values[sec] = SECTIONS[sec](**kw)
            except ValueError as exc:
                raise UsageError(f"config [{sec}]: {exc}") from None
        return cls(seed, **values)

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is not None:
            self.seed = seed
        return self

    # seeded views ---------------------------------------------------------
    @property
    def corpus(self) -> CorpusConfig:
        return replace(self.sections["corpus"], seed=tr.sub_seed(self.seed, "corpus"))

    @property
    def model(self) -> tr.ModelConfig:
        s = self.sections
        return tr.ModelConfig(s["encoder"], s["attention"], s["adversary"])

    def train(self, alpha: float | None = None, stage: str = "pretrain-asr") -> tr.TrainConfig:
        t = self.sections["train"]
        return replace(t, seed=tr.sub_seed(self.seed, "train"), stage=stage,
                       alpha=t.alpha if alpha is None else alpha)

    @property
    def eval(self) -> X.EvalConfig:
        emb = replace(self.sections["embedding"], seed=tr.sub_seed(self.seed, "embedding"))
        return replace(self.sections["eval"], embedding=emb)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser["run"] = {"seed": str(self.seed)}
        for name, obj in self.sections.items():
            parser[name] = {k: _format_value(getattr(obj, k)) for k in _keys(type(obj))}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _atomic_write(path: Path, data: str | bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data, encoding="utf-8")
    else:
        tmp.write_bytes(data)
    tmp.replace(path)


def _echo_config(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "config.ini", cfg.to_ini())
    _atomic_write(out / "seed.txt", f"{cfg.seed}\n")


# --------------------------------------------------------------------------
# commands


def cmd_synth_data(args, cfg: RunConfig) -> int:
    corpus = generate_synthetic_corpus(cfg.corpus)
    splits = make_splits(corpus.utterances, cfg.sections["splits"])
    out = Path(args.out)
    write_corpus(out, corpus, splits)
    _echo_config(out, cfg)
    print(f"wrote {len(corpus.utterances)} utterances to {out}")
    return EXIT_OK


def _load_data(path):
    corpus, splits = read_corpus(Path(path))
    return corpus, splits, X.datasets(corpus, splits)


def cmd_train(args, cfg: RunConfig) -> int:
    corpus, splits, sets = _load_data(args.data)
    out = Path(args.out)
    stages = tr.STAGES if args.stage is None else (args.stage,)
    if args.resume:
        params, header = tr.load_checkpoint(Path(args.resume))
        done = header.get("extra", {}).get("stages", [header["stage"]])
    else:
        if stages[0] != "pretrain-asr":
            raise UsageError(f"--stage {stages[0]} needs an existing checkpoint (--resume)")
        params = tr.ModelParams.initialize(cfg.model, corpus.vocab, X.adv_speakers(sets),
                                           tr.sub_seed(cfg.seed, "train"))
        done = []
    rows = []
    for stage in stages:
        tcfg = cfg.train(args.alpha, stage)
        rows += tr.run_stage(tcfg, params, tr.Dataset(tr.STAGE_DATASET[stage],
                                                      sets[tr.STAGE_DATASET[stage]]), stage)
        done = done + [stage]
    _echo_config(out, cfg)
    tr.save_checkpoint(out / "checkpoint.bin", params, tcfg, stages[-1], {"stages": done})
    _atomic_write(out / "losses.csv", tr.loss_log_csv(rows))
    print(f"trained stages {', '.join(stages)} (alpha={tcfg.alpha}); checkpoint {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_decode(args, cfg: RunConfig) -> int:
    corpus, splits, sets = _load_data(args.data)
    params, _ = tr.load_checkpoint(Path(args.checkpoint))
    ecfg = cfg.eval
    utts = sets[args.split]
    hyps = X.decode(params, utts, args.decoder or ecfg.decoder, ecfg.beam_size, ecfg.max_len)
    for u, h in zip(utts, hyps):
        print(f"{u.id}\t{h}")
    return EXIT_OK


def _metric_rows(values: dict, metrics) -> list[tuple[str, str]]:
    return [(m, _cell(values.get(m))) for m in metrics]


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return MISSING
    if isinstance(v, dict):
        return " / ".join(f"{k} {val:.2f}" for k, val in sorted(v.items())) or MISSING
    return f"{v:.4f}" if abs(v) < 1 else f"{v:.2f}"


def cmd_eval(args, cfg: RunConfig) -> int:
    corpus, splits, sets = _load_data(args.data)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in metrics if m not in X.METRICS]
    if bad:
        raise UsageError(f"unknown metrics {bad}; choose from {', '.join(X.METRICS)}")
    if args.representation == "phi":
        if not args.checkpoint:
            raise UsageError("--representation phi needs --checkpoint")
        params, header = tr.load_checkpoint(Path(args.checkpoint))
        label, alpha = f"phi_{header['train']['alpha']:g}", header["train"]["alpha"]
    else:
        params, label, alpha = None, "features", None
    values = X.evaluate(params, sets, metrics, cfg.eval, tr.sub_seed(cfg.seed, "eval"))
    out = Path(args.out)
    _echo_config(out, cfg)
    res = values.pop("_open_set", None)
    if res is not None:
        _atomic_write(out / "scores.csv", se.scores_csv(res.scores))
        _atomic_write(out / "roc.csv", se.roc_csv(res.roc))
    result = {"representation": label, "alpha": alpha, "metrics": metrics, "values": values}
    _atomic_write(out / "metrics.json", json.dumps(result, indent=2, sort_keys=True) + "\n")
    table = [("metric", label)] + _metric_rows(values, metrics)
    _atomic_write(out / "report.csv", _csv(table))
    text = _markdown(table)
    _atomic_write(out / "report.md", text)
    print(text, end="")
    return EXIT_OK


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _markdown(rows) -> str:
    head, *body = rows
    lines = ["| " + " | ".join(head) + " |", "|" + "|".join("---" for _ in head) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines) + "\n"


def cmd_report(args, cfg: RunConfig | None = None) -> int:
    runs = []
    for d in args.evals:
        path = Path(d) / "metrics.json"
        if not path.exists():
            raise DataError(f"{path} not found")
        runs.append(json.loads(path.read_text(encoding="utf-8")))
    # raw features first, then ascending alpha
    runs.sort(key=lambda r: (r["alpha"] is not None, r["alpha"] or 0.0))
    metrics = list(dict.fromkeys(m for r in runs for m in r["metrics"]))
    rows = [["metric"] + [r["representation"] for r in runs]]
    for m in metrics:
        rows.append([m] + [_cell(r["values"].get(m)) for r in runs])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "report.csv", _csv(rows))
    text = _markdown(rows)
    _atomic_write(out / "report.md", text)
    print(text, end="")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spkadv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--seed", type=int, help="overrides run.seed")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config key (repeatable)")

    sp = sub.add_parser("synth-data", help="generate a synthetic corpus with splits")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("train", help="run the training schedule or one stage of it")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--stage", choices=tr.STAGES)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("decode", help="print hypotheses for a split")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test-adv")
    sp.add_argument("--decoder", choices=("attention", "ctc"))
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval", help="attack a representation and score it")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--out", required=True)
    sp.add_argument("--metrics", default=",".join(X.DEFAULT_METRICS))
    sp.add_argument("--representation", choices=("features", "phi"), default="phi")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="merge eval outputs into one table")
    sp.add_argument("evals", nargs="+", help="eval output directories")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = None
        if args.command != "report":
            cfg = RunConfig.load(args.config, args.set).with_seed(args.seed)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, se.DegenerateCovarianceError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, KeyError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA

if __name__ == "__main__":
    sys.exit(main())
