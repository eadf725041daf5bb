"""Command-line entry point: dataset generation, training, evaluation and diagnostics."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

from . import dataops
from . import eval as ev
from . import train as tr
from .model import CheckpointError, ConfigMismatchError
from .tensor import NonFiniteError, ShapeError
from .views import ViewError

log = logging.getLogger("relproxy")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
CONFIG_FILE = "effective_config.json"


class UsageError(Exception):
    code = "E_USAGE"


class ConfigError(UsageError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ------------------------------------------------------------ run config

@dataclass(frozen=True)
class EvalOptions:
    split: str = "test"
    epsilon_scale: float = ev.DEFAULT_EPSILON_SCALE

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")
        if not self.epsilon_scale >= 0:
            raise ValueError("epsilon_scale must be >= 0")


SECTIONS = {"data": dataops.DatasetMeta, "train": tr.TrainConfig, "eval": EvalOptions}


@dataclass(frozen=True)
class RunConfig:
    data: dataops.DatasetMeta
    train: tr.TrainConfig
    eval: EvalOptions

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def save(self, directory) -> Path:
        path = Path(directory) / CONFIG_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        return path


def _field_types() -> dict[str, dict[str, str]]:
    return {s: {f.name: getattr(f.type, "__name__", str(f.type)) for f in fields(cls)}
            for s, cls in SECTIONS.items()}


def _resolve(key: str) -> tuple[str, str]:
    types = _field_types()
    if "." in key:
        section, name = key.split(".", 1)
        if section not in types or name not in types[section]:
            raise ConfigError("E_CONFIG_UNKNOWN_KEY", f"unknown config key {key!r}")
        return section, name
    owners = [s for s in types if key in types[s]]
    if not owners:
        raise ConfigError("E_CONFIG_UNKNOWN_KEY", f"unknown config key {key!r}")
    if len(owners) > 1:
        raise ConfigError("E_CONFIG_AMBIGUOUS_KEY",
                          f"key {key!r} exists in {owners}; qualify it as section.{key}")
    return owners[0], key


def _coerce(key: str, type_name: str, value):
    def bad():
        return ConfigError("E_CONFIG_TYPE", f"{key}: expected {type_name}, got {value!r}")
    if value is None:
        if "None" in type_name:
            return None
        raise bad()
    base = type_name.replace("| None", "").strip()
    if base == "bool":
        if isinstance(value, bool):
            return value
        raise bad()
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise bad()
        return int(value)
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad()
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise bad()
        return value
    raise bad()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def config_load(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``key=value`` overrides.

    Keys are ``section.field`` (sections: data, train, eval) or a bare field
    name when it is unique across sections.
    """
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    types = _field_types()

    def put(key, value):
        section, name = _resolve(key)
        values[section][name] = _coerce(key, types[section][name], value)

    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("E_CONFIG_FILE", f"cannot read config file {path}: {exc}") from None
        try:
            doc = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError("E_CONFIG_FILE", f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("E_CONFIG_FILE", f"config file {path} must hold a JSON object")
        for key, value in doc.items():
            if key in SECTIONS and isinstance(value, dict):
                for name, v in value.items():
                    put(f"{key}.{name}", v)
            else:
                put(key, value)
    for item in overrides:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError("E_CONFIG_SYNTAX", f"override {item!r} is not key=value")
        put(key.strip(), _parse_value(text))
    built = {}
    for section, cls in SECTIONS.items():
        try:
            obj = cls(**values[section])
            if isinstance(obj, dataops.DatasetMeta):
                obj.validate()
        except (ValueError, dataops.InvalidMetaError) as exc:
            raise ConfigError("E_CONFIG_RANGE", f"{section}: {exc}") from None
        built[section] = obj
    return RunConfig(**built)


# ------------------------------------------------------------ error reporting

_ERRORS = [
    (dataops.InvalidMetaError, "dataops", "E_DATA_META"),
    (dataops.ChecksumError, "dataops", "E_DATA_CHECKSUM"),
    (dataops.TruncatedDataError, "dataops", "E_DATA_TRUNCATED"),
    (dataops.FormatVersionError, "dataops", "E_DATA_FORMAT"),
    (dataops.DatasetError, "dataops", "E_DATA"),
    (ConfigMismatchError, "model", "E_CONFIG_MISMATCH"),
    (CheckpointError, "model", "E_CHECKPOINT"),
    (tr.DivergenceError, "train", "E_DIVERGED"),
    (tr.TrainError, "train", "E_TRAIN"),
    (ev.EvalError, "eval", "E_EVAL"),
    (ViewError, "views", "E_VIEW"),
    (NonFiniteError, "tensor", "E_NONFINITE"),
    (ShapeError, "tensor", "E_SHAPE"),
    (OSError, "io", "E_IO"),
]


def _report(exc: BaseException) -> tuple[str, str]:
    for cls, subsystem, code in _ERRORS:
        if isinstance(exc, cls):
            return subsystem, code
    return "runtime", "E_RUNTIME"


# ------------------------------------------------------------ argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _parse_axis(spec: str) -> tuple[str, list]:
    name, sep, body = spec.partition("=")
    if not sep or not name or not body:
        raise UsageError(f"axis {spec!r} must look like name=1..6 or name=0.2,0.3")
    try:
        if ".." in body:
            lo, hi = body.split("..")
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [_parse_value(v) for v in body.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse axis values in {spec!r}") from None
    if not values or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        raise UsageError(f"axis {spec!r} needs numeric values")
    return name, values


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="JSON run config (sections data, train, eval)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field, e.g. lr=0.01 or train.seed=3 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relproxy", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, metavar="DIR", help="output dataset directory")
    p.add_argument("--mode", choices=("fine", "coarse"), help="dataset mode")
    p.add_argument("--classes", type=int, metavar="C", help="number of classes")
    p.add_argument("--k", type=int, metavar="K", help="construction k (key slots per group)")
    p.add_argument("--seed", type=int, metavar="S", help="generation seed")
    _add_config(p)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    p.add_argument("--out", required=True, metavar="DIR", help="checkpoint and log directory")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    _add_config(p)

    p = sub.add_parser("eval", help="evaluate a trained model")
    p.add_argument("--model", required=True, metavar="DIR", help="checkpoint directory")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    p.add_argument("--split", choices=("train", "test"), help="split to evaluate (default test)")
    p.add_argument("--dump-embeddings", metavar="DIR", help="write emb.bin and emb_meta.json here")
    _add_config(p)

    p = sub.add_parser("sweep", help="accuracy over a grid of view counts / patch sizes")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    p.add_argument("--axis", action="append", required=True, metavar="NAME=VALUES",
                   help="l=1..9 (local views) or patch=0.2,0.3,0.5 (patch fraction); repeatable")
    p.add_argument("--seeds", type=int, default=3, metavar="N", help="training seeds per cell (default 3)")
    p.add_argument("--out", required=True, metavar="FILE", help="result JSON")
    _add_config(p)

    p = sub.add_parser("ablate", help="accuracy of every model and objective variant")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    p.add_argument("--out", required=True, metavar="FILE", help="result JSON")
    p.add_argument("--seeds", type=int, default=3, metavar="N", help="training seeds per variant (default 3)")
    p.add_argument("--variants", metavar="LIST", help="comma-separated subset of variants")
    _add_config(p)

    p = sub.add_parser("graph", help="attention graph of one instance")
    p.add_argument("--model", required=True, metavar="DIR", help="checkpoint directory")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    p.add_argument("--instance", required=True, type=int, metavar="I", help="instance index")
    p.add_argument("--split", choices=("train", "test"), default="test", help="split (default test)")
    p.add_argument("--out", required=True, metavar="FILE", help="graph JSON")

    p = sub.add_parser("audit", help="bag-ambiguity audit of a fine dataset")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory")
    p.add_argument("--m", required=True, type=int, metavar="M", help="bag size (slot views)")
    return parser


# ------------------------------------------------------------ commands

def _emit(doc) -> None:
    print(json.dumps(doc, indent=2))


def _with_data(cfg: RunConfig, meta: dataops.DatasetMeta) -> RunConfig:
    return replace(cfg, data=meta)


def cmd_gen(args, cfg: RunConfig) -> int:
    flags = {"mode": args.mode, "c": args.classes, "k": args.k, "seed": args.seed}
    meta = replace(cfg.data, **{k: v for k, v in flags.items() if v is not None})
    try:
        meta.validate()
    except dataops.InvalidMetaError as exc:
        raise ConfigError("E_CONFIG_RANGE", f"data: {exc}") from None
    dataset = dataops.generate(meta)
    out = dataops.save(dataset, args.out)
    _with_data(cfg, meta).save(out)
    _emit({"out": str(out), "train": len(dataset.train), "test": len(dataset.test), "meta": meta.to_dict()})
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    dataset = dataops.load(args.data)
    out = Path(args.out)
    state = None
    if args.resume and (out / "state.json").exists():
        state = tr.checkpoint_load(out, expect=cfg.train)
    else:
        # a fresh run never appends to an older log
        for name in ("metrics.jsonl", "timing.jsonl"):
            (out / name).unlink(missing_ok=True)
    _with_data(cfg, dataset.meta).save(out)
    state = tr.train(dataset, cfg.train, state, out)
    last = state.metrics[-1] if state.metrics else {}
    _emit({"out": str(out), "epochs": state.epoch, "last": last})
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    dataset = dataops.load(args.data)
    state = tr.checkpoint_load(args.model)
    split = args.split or cfg.eval.split
    report = ev.evaluate(state, dataset, split)
    dis = ev.disjointness(state, dataset, split, scale=cfg.eval.epsilon_scale)
    report["disjoint_fraction"] = dis.fraction
    if args.dump_embeddings:
        out = ev.dump_embeddings(state, dataset, args.dump_embeddings, split)
        _with_data(replace(cfg, train=state.cfg), dataset.meta).save(out)
    _emit(report)
    return EXIT_OK


def _result_dir(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.parent


def cmd_sweep(args, cfg: RunConfig) -> int:
    dataset = dataops.load(args.data)
    axes = dict(_parse_axis(a) for a in args.axis)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    for name, values in axes.items():
        for v in values:
            try:
                replace(cfg.train, **{ev.axis_field(name): v})
            except (ValueError, TypeError) as exc:
                raise UsageError(f"axis {name}={v}: {exc}") from None
    result = ev.sweep(dataset, cfg.train, axes, args.seeds,
                      progress=lambda c: log.info("cell %s mean %.4f", c["coords"], c["mean_acc"]))
    out = Path(args.out)
    result.save(out)
    _with_data(cfg, dataset.meta).save(_result_dir(out))
    _emit(result.to_dict())
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    dataset = dataops.load(args.data)
    variants = args.variants.split(",") if args.variants else list(ev.ABLATION_ORDER)
    unknown = [v for v in variants if v not in tr.VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {sorted(tr.VARIANTS)}")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    result = ev.ablate(dataset, cfg.train, args.seeds, variants,
                       progress=lambda c: log.info("variant %s mean %.4f", c["coords"], c["mean_acc"]))
    out = Path(args.out)
    result.save(out)
    _with_data(cfg, dataset.meta).save(_result_dir(out))
    _emit(result.to_dict())
    return EXIT_OK


def cmd_graph(args, cfg: RunConfig) -> int:
    dataset = dataops.load(args.data)
    state = tr.checkpoint_load(args.model)
    graph = ev.attention_graph(state, dataset, args.instance, args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(graph.to_dict(), indent=2), encoding="utf-8")
    _emit(graph.to_dict())
    return EXIT_OK


def cmd_audit(args, cfg: RunConfig) -> int:
    dataset = dataops.load(args.data)
    for g in dataops.bag_ambiguity_audit(dataset, args.m):
        print(f"group {g.group_id} classes {list(g.classes)} m={g.m}: {g.verdict}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "ablate": cmd_ablate, "graph": cmd_graph, "audit": cmd_audit}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = config_load(getattr(args, "config", None), getattr(args, "overrides", []))
        return COMMANDS[args.command](args, cfg)
    except SystemExit as exc:                       # --help and friends
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"relproxy: error [{exc.code}] usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:                        # noqa: BLE001 - mapped to exit code 2
        subsystem, code = _report(exc)
        print(f"relproxy: error [{code}] {subsystem}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
