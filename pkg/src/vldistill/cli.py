"""Command-line front end.

Every command resolves its configuration as built-in defaults, then the
``--config`` JSON file, then explicit flags, writes its artifacts plus a
``manifest.json`` into the output directory, and can be re-run bit-exactly
with ``vldistill replay <manifest>``.

Config file schema (all sections optional, unknown keys rejected)::

    {
      "train":   {TrainConfig fields, e.g. "steps": 400, "learning_rate": 0.001},
      "distill": {DistillConfig fields, e.g. "alpha": 10, "queue_size": 4096},
      "model":   {TransformerConfig overrides, e.g. "num_layers": 4},
      "gen":     {"scenes": 2000, "eval_scenes": 500, "seed": 0}
    }

The default output root is ``$VLDISTILL_OUT`` (falling back to ``./runs``);
each command writes to ``<root>/<command>`` unless ``--out`` is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, dumps, load_checkpoint, loads, save_checkpoint
from .harness import (
    ALIGNED_TEACHER_VIEW,
    STUDENT_VIEW,
    TEACHER_VIEW,
    DataLeakError,
    TrainConfig,
    TrainingDiverged,
    adapt_teacher,
    attention_distance,
    attention_maps,
    distill_pretrain,
    evaluate,
    finetune,
    model_config_for,
    train_vlp,
)
from .losses import DistillConfig, IncompatibleError
from .sweeps import AXES, default_grid, run_sweep, summarise
from .tokens import ConfigError, generate_corpus, read_corpus, write_corpus
from .transformer import CapacityError, TransformerConfig

log = logging.getLogger("vldistill")

ENV_OUT = "VLDISTILL_OUT"
DEFAULT_TRAIN_SCENES = 2000
DEFAULT_EVAL_SCENES = 500
EVAL_ID_OFFSET = 1_000_000

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CHECK = 0, 1, 2, 3

_VIEWS = {"teacher": TEACHER_VIEW, "aligned": ALIGNED_TEACHER_VIEW, "student": STUDENT_VIEW}


class SelfCheckError(RuntimeError):
    pass


class UsageError(ValueError):
    pass


# -- config resolution --------------------------------------------------------------------

# flag dest -> (section, field)
_TRAIN_FLAGS = {
    "steps": "steps", "epochs": "epochs", "batch_size": "batch_size", "lr": "learning_rate",
    "weight_decay": "weight_decay", "warmup": "warmup_steps", "seed": "seed",
    "data_fraction": "data_fraction", "cap_len": "cap_len", "tag_len": "tag_len", "vis_len": "vis_len",
}
_DISTILL_FLAGS = {
    "alpha": "alpha", "beta": "beta", "tau": "tau", "tau_d": "tau_d", "queue": "queue_size",
    "hid_variant": "hid_variant", "att_scope": "att_scope", "token_scope": "token_scope",
    "cls_weight": "cls_weight", "ce_weight": "ce_weight", "vlp_weight": "vlp_weight",
}

# desk-scale defaults used by the CLI
TRAIN_DEFAULTS = {
    "teacher": dict(steps=2000, learning_rate=1e-3, warmup_steps=100),
    "adapt": dict(steps=500, learning_rate=3e-4, warmup_steps=50),
    "student": dict(steps=500, warmup_steps=50),
    "finetune": dict(steps=300),
}


def _read_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(cfg) - {"train", "distill", "model", "gen"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _merge(cls, base: dict, file_section: dict, flags: dict, mapping: dict, args) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    bad = set(file_section) - names
    if bad:
        raise ConfigError(f"unknown {cls.__name__} field(s) in config file: {sorted(bad)}")
    out = dict(base)
    out.update(file_section)
    for dest, name in mapping.items():
        v = getattr(args, dest, None)
        if v is not None:
            out[name] = v
    return out


def _train_dict(args, file_cfg: dict, kind: str) -> dict:
    base = TrainConfig(**TRAIN_DEFAULTS.get(kind, {})).to_dict()
    d = _merge(TrainConfig, base, file_cfg.get("train", {}), {}, _TRAIN_FLAGS, args)
    if getattr(args, "corpus", None):
        d["corpus_path"] = str(args.corpus)
    TrainConfig.from_dict(d)       # validate
    return d


def _distill_dict(args, file_cfg: dict, base: DistillConfig) -> dict:
    d = _merge(DistillConfig, base.to_dict(), file_cfg.get("distill", {}), {}, _DISTILL_FLAGS, args)
    DistillConfig.from_dict(d)
    return d


def _model_overrides(file_cfg: dict) -> dict:
    m = file_cfg.get("model", {})
    bad = set(m) - {f.name for f in dataclasses.fields(TransformerConfig)}
    if bad:
        raise ConfigError(f"unknown TransformerConfig field(s) in config file: {sorted(bad)}")
    return m


# -- output handling ----------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(ENV_OUT, "runs")) / command


def _prepare_out(out: Path, names, force: bool) -> None:
    clash = [n for n in list(names) + ["manifest.json"] if (out / n).exists()]
    if clash and not force:
        raise UsageError(f"{out} already holds {clash}; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n")


def _write_manifest(out: Path, command: str, config: dict, inputs: dict, outputs: list) -> dict:
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("train", {}).get("seed", config.get("gen", {}).get("seed")),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {n: _sha256(out / n) for n in outputs},
        "output_dir": str(out),
        "tool_version": __version__,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def _save_ckpt_checked(ckpt, path: Path) -> None:
    save_checkpoint(ckpt, path)
    first = path.read_bytes()
    if dumps(loads(first)) != first:
        raise SelfCheckError(f"checkpoint {path} does not round-trip byte-exactly")


def _check_metrics(metrics, distill: DistillConfig, task: str) -> None:
    for r in metrics:
        if task == "pretrain":
            vlp = r["mlm"] + r["itm"]
            parts = [vlp * distill.vlp_weight, distill.alpha * r["att"], distill.beta * r["hid"]]
        else:
            parts = [distill.ce_weight * r["ce"], distill.cls_weight * r["cls"],
                     distill.alpha * r["att"], distill.beta * r["hid"]]
        want = sum(parts)
        if abs(want - r["total"]) > 1e-6 * max(1.0, abs(r["total"])):
            raise SelfCheckError(f"step {r['step']}: components sum to {want}, logged total {r['total']}")


def _load_corpus(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"corpus {p} does not exist")
    return read_corpus(p)


def _load_ckpt(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"checkpoint {p} does not exist")
    return load_checkpoint(p)


# -- commands: each takes a resolved config and an output directory -----------------------

def run_gen_data(config: dict, out: Path) -> list:
    g = config["gen"]
    train = generate_corpus(g["scenes"], g["seed"], start_id=0)
    ev = generate_corpus(g["eval_scenes"], g["seed"], start_id=EVAL_ID_OFFSET)
    write_corpus(out / "train.jsonl", train)
    write_corpus(out / "eval.jsonl", ev)
    print(f"wrote {len(train)} train and {len(ev)} eval scenes to {out}")
    return ["train.jsonl", "eval.jsonl"]


def _finish_training(ckpt, out: Path, distill: DistillConfig, task: str) -> list:
    _check_metrics(ckpt.metrics, distill, task)
    _save_ckpt_checked(ckpt, out / "model.ckpt")
    ckpt.metrics.write(out / "metrics.jsonl")
    last = ckpt.metrics[-1] if len(ckpt.metrics) else {}
    print(json.dumps({"step": ckpt.step, **{k: v for k, v in last.items() if k != "step"}}, sort_keys=True))
    return ["model.ckpt", "metrics.jsonl"]


def run_train(config: dict, out: Path) -> list:
    train = TrainConfig.from_dict(config["train"])
    corpus = _load_corpus(config["inputs"]["corpus"])
    role = config["role"]
    model_cfg = model_config_for(role, corpus, train, **config.get("model", {}))
    view = TEACHER_VIEW if role == "teacher" else STUDENT_VIEW
    ckpt = train_vlp(model_cfg, corpus, train, view, role=role)
    return _finish_training(ckpt, out, DistillConfig.off(), "pretrain")


def run_adapt(config: dict, out: Path) -> list:
    train = TrainConfig.from_dict(config["train"])
    teacher = _load_ckpt(config["inputs"]["teacher"])
    corpus = _load_corpus(config["inputs"]["corpus"])
    ckpt = adapt_teacher(teacher, corpus, train)
    return _finish_training(ckpt, out, DistillConfig.off(), "pretrain")


def run_distill(config: dict, out: Path) -> list:
    train = TrainConfig.from_dict(config["train"])
    distill = DistillConfig.from_dict(config["distill"])
    teacher_path = Path(config["inputs"]["teacher"])
    before = teacher_path.read_bytes() if teacher_path.exists() else None
    teacher = _load_ckpt(teacher_path)
    snapshot = {k: v.tobytes() for k, v in teacher.params.items()}
    corpus = _load_corpus(config["inputs"]["corpus"])
    student_cfg = model_config_for("student", corpus, train,
                                   TransformerConfig.from_dict(teacher.config["model"]).num_answers,
                                   **config.get("model", {}))
    ckpt = distill_pretrain(teacher, student_cfg, corpus, distill, train)
    if {k: v.tobytes() for k, v in teacher.params.items()} != snapshot or \
            teacher_path.read_bytes() != before:
        raise SelfCheckError("teacher parameters changed during distillation")
    return _finish_training(ckpt, out, distill, "pretrain")


def run_finetune(config: dict, out: Path) -> list:
    train = TrainConfig.from_dict(config["train"])
    distill = DistillConfig.from_dict(config["distill"])
    student = _load_ckpt(config["inputs"]["student"])
    teacher = _load_ckpt(config["inputs"]["teacher"]) if config["inputs"].get("teacher") else None
    corpus = _load_corpus(config["inputs"]["corpus"])
    ckpt = finetune(student, config["task"], teacher, distill, train, corpus)
    return _finish_training(ckpt, out, distill, config["task"])


METRIC_KEYS = ("masked_token_accuracy", "mean_loss", "num_records", "num_masked",
               "task_accuracy", "caption_exact_match")


def run_eval(config: dict, out: Path) -> list:
    ckpt = _load_ckpt(config["inputs"]["ckpt"])
    corpus = _load_corpus(config["inputs"]["corpus"])
    view = _VIEWS[config["view"]] if config.get("view") else None
    m = evaluate(ckpt, corpus, config["task"], view=view, rounds=config["rounds"])
    block = {k: m.get(k) for k in METRIC_KEYS}
    block["task"] = config["task"]
    _write_json(out / "metrics.json", block)
    for k in ("task",) + METRIC_KEYS:
        print(f"{k}: {block[k]}")
    return ["metrics.json"]


def run_inspect_attention(config: dict, out: Path) -> list:
    student = _load_ckpt(config["inputs"]["student"])
    teacher = _load_ckpt(config["inputs"]["teacher"])
    corpus = _load_corpus(config["inputs"]["corpus"])
    if config.get("limit"):
        corpus = corpus[: config["limit"]]
    s_view, t_view = _VIEWS[config["student_view"]], _VIEWS[config["teacher_view"]]
    mean, dists = attention_distance(student, teacher, corpus, s_view, t_view, per_record=True)
    s_maps = attention_maps(student, corpus, s_view)
    t_maps = attention_maps(teacher, corpus, t_view)
    records = []
    for rec, a, b, d in zip(corpus, s_maps, t_maps, dists):
        seq = rec.sequence(*s_view)
        records.append({
            "scene_id": rec.scene_id,
            "modality": seq.modality[: a.shape[0]].tolist(),
            "student": [[round(float(x), 6) for x in row] for row in a],
            "teacher": [[round(float(x), 6) for x in row] for row in b],
            "l2_distance": round(d, 9),
        })
    _write_json(out / "attention.json", {"mean_l2_distance": round(mean, 9), "records": records})
    print(f"mean_l2_distance: {mean:.6f} over {len(records)} records")
    return ["attention.json"]


def run_sweep_cmd(config: dict, out: Path) -> list:
    train = TrainConfig.from_dict(config["train"])
    distill = DistillConfig.from_dict(config["distill"])
    teacher = _load_ckpt(config["inputs"]["teacher"])
    corpus = _load_corpus(config["inputs"]["corpus"])
    eval_corpus = _load_corpus(config["inputs"]["eval_corpus"])
    rows = run_sweep(config["axis"], teacher, corpus, eval_corpus, distill, train,
                     config["grid"], config["seeds"], config.get("workers", 1))
    _write_text(out / "cells.jsonl", "".join(json.dumps(r.as_dict(), sort_keys=True) + "\n" for r in rows))
    table = summarise(rows)
    _write_json(out / "summary.json", table)
    print(f"{'value':>24} {'acc':>8} {'std':>7} {'att_l2':>8}")
    for row in table:
        print(f"{str(row['value']):>24} {row['masked_token_accuracy']:8.4f} "
              f"{row['masked_token_accuracy_std']:7.4f} {row['attention_distance']:8.4f}")
    return ["cells.jsonl", "summary.json"]


RUNNERS = {
    "gen-data": run_gen_data,
    "train": run_train,
    "adapt": run_adapt,
    "distill": run_distill,
    "finetune": run_finetune,
    "eval": run_eval,
    "inspect-attention": run_inspect_attention,
    "sweep": run_sweep_cmd,
}


# -- resolution of argparse namespaces into configs ------------------------------------------

def _resolve(args) -> dict:
    cmd = args.command
    file_cfg = _read_config_file(getattr(args, "config", None))
    if cmd == "gen-data":
        g = {"scenes": DEFAULT_TRAIN_SCENES, "eval_scenes": DEFAULT_EVAL_SCENES, "seed": 0}
        g.update(file_cfg.get("gen", {}))
        for k in ("scenes", "eval_scenes", "seed"):
            if getattr(args, k) is not None:
                g[k] = getattr(args, k)
        if g["scenes"] <= 0 or g["eval_scenes"] <= 0:
            raise UsageError("--scenes and --eval-scenes must be positive")
        return {"gen": g, "inputs": {}}
    if cmd == "train":
        return {"role": args.role, "train": _train_dict(args, file_cfg, args.role),
                "model": _model_overrides(file_cfg), "inputs": {"corpus": args.corpus}}
    if cmd == "adapt":
        return {"train": _train_dict(args, file_cfg, "adapt"),
                "inputs": {"teacher": args.teacher, "corpus": args.corpus}}
    if cmd == "distill":
        return {"train": _train_dict(args, file_cfg, "student"),
                "distill": _distill_dict(args, file_cfg, DistillConfig()),
                "model": _model_overrides(file_cfg),
                "inputs": {"teacher": args.teacher, "corpus": args.corpus}}
    if cmd == "finetune":
        return {"task": args.task, "train": _train_dict(args, file_cfg, "finetune"),
                "distill": _distill_dict(args, file_cfg, DistillConfig.off()),
                "inputs": {"student": args.student, "teacher": args.teacher, "corpus": args.corpus}}
    if cmd == "eval":
        return {"task": args.task, "view": args.view, "rounds": args.rounds,
                "inputs": {"ckpt": args.ckpt, "corpus": args.corpus}}
    if cmd == "inspect-attention":
        return {"limit": args.limit, "student_view": args.student_view, "teacher_view": args.teacher_view,
                "inputs": {"student": args.student, "teacher": args.teacher, "corpus": args.corpus}}
    if cmd == "sweep":
        grid = default_grid(args.axis) if args.grid is None else _parse_grid(args.axis, args.grid)
        return {"axis": args.axis, "grid": grid, "seeds": args.seeds, "workers": args.workers,
                "train": _train_dict(args, file_cfg, "student"),
                "distill": _distill_dict(args, file_cfg, DistillConfig()),
                "inputs": {"teacher": args.teacher, "corpus": args.corpus, "eval_corpus": args.eval_corpus}}
    raise UsageError(f"unknown command {cmd!r}")


def _parse_grid(axis: str, text: str) -> list:
    items = [s.strip() for s in text.split(",") if s.strip()]
    if axis == "queue_size":
        return [int(s) for s in items]
    if axis in ("data_fraction", "epochs"):
        return [float(s) for s in items]
    return items


def _execute(command: str, config: dict, out: Path, force: bool) -> dict:
    names = {"gen-data": ["train.jsonl", "eval.jsonl"], "eval": ["metrics.json"],
             "inspect-attention": ["attention.json"], "sweep": ["cells.jsonl", "summary.json"]}
    _prepare_out(out, names.get(command, ["model.ckpt", "metrics.jsonl"]), force)
    outputs = RUNNERS[command](config, out)
    missing = [n for n in outputs if not (out / n).exists()]
    if missing:
        raise SelfCheckError(f"outputs not written: {missing}")
    inputs = {k: v for k, v in config.get("inputs", {}).items() if v is not None}
    return _write_manifest(out, command, config, inputs, outputs)


def cmd_replay(args) -> int:
    path = Path(args.manifest)
    if not path.exists():
        raise ConfigError(f"manifest {path} does not exist")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    out = Path(args.out) if args.out else Path(manifest["output_dir"])
    new = _execute(manifest["command"], manifest["config"], out, force=True)
    bad = [n for n, h in manifest["outputs"].items() if new["outputs"].get(n) != h]
    if bad:
        print(f"replay mismatch in {bad}", file=sys.stderr)
        return EXIT_CHECK
    print(f"replay reproduced {sorted(manifest['outputs'])} byte-exactly")
    return EXIT_OK


# -- argument parser ------------------------------------------------------------------------

def _add_train_flags(p) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--steps", type=int)
    g.add_argument("--epochs", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float, help="learning rate")
    g.add_argument("--weight-decay", type=float)
    g.add_argument("--warmup", type=int, help="linear warmup steps")
    g.add_argument("--seed", type=int)
    g.add_argument("--data-fraction", type=float)
    g.add_argument("--cap-len", type=int)
    g.add_argument("--tag-len", type=int)
    g.add_argument("--vis-len", type=int)


def _add_distill_flags(p) -> None:
    from .losses import ATT_SCOPES, HID_VARIANTS, TOKEN_SCOPES
    g = p.add_argument_group("distillation")
    g.add_argument("--alpha", type=float, help="attention loss weight")
    g.add_argument("--beta", type=float, help="hidden-state loss weight")
    g.add_argument("--tau", type=float, help="contrastive temperature")
    g.add_argument("--tau-d", type=float, help="soft-label temperature")
    g.add_argument("--queue", type=int, help="sample queue size")
    g.add_argument("--hid-variant", choices=HID_VARIANTS)
    g.add_argument("--att-scope", choices=ATT_SCOPES)
    g.add_argument("--token-scope", choices=TOKEN_SCOPES)
    g.add_argument("--cls-weight", type=float, help="soft-label weight (fine-tuning)")
    g.add_argument("--ce-weight", type=float, help="task loss weight (fine-tuning)")
    g.add_argument("--vlp-weight", type=float, help="MLM+ITM weight (pre-training)")


def _common(p) -> None:
    p.add_argument("--out", help=f"output directory (default ${ENV_OUT}/<command>)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--config", help="JSON config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vldistill", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"vldistill {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate train/eval corpora")
    _common(p)
    p.add_argument("--scenes", type=int, help=f"training scenes (default {DEFAULT_TRAIN_SCENES})")
    p.add_argument("--eval-scenes", type=int, help=f"eval scenes (default {DEFAULT_EVAL_SCENES})")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="VLP pre-training (teacher by default)")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--role", choices=("teacher", "student"), default="teacher")
    _add_train_flags(p)

    p = sub.add_parser("adapt", help="re-train a teacher on aligned visual tokens")
    _common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--corpus", required=True)
    _add_train_flags(p)

    p = sub.add_parser("distill", help="pre-training stage distillation into a student")
    _common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--corpus", required=True)
    _add_train_flags(p)
    _add_distill_flags(p)

    p = sub.add_parser("finetune", help="downstream fine-tuning, optionally distilled")
    _common(p)
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", help="task-fine-tuned teacher checkpoint")
    p.add_argument("--task", choices=("qa", "caption"), required=True)
    p.add_argument("--corpus", required=True)
    _add_train_flags(p)
    _add_distill_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a held-out corpus")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--task", choices=("pretrain", "qa", "caption"), default="pretrain")
    p.add_argument("--view", choices=tuple(_VIEWS), help="input view (default: the checkpoint's own)")
    p.add_argument("--rounds", type=int, default=4, help="masking rounds per record")

    p = sub.add_parser("inspect-attention", help="dump head-averaged attention maps and l2 distances")
    _common(p)
    p.add_argument("--student", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--limit", type=int, help="only the first N records")
    p.add_argument("--student-view", choices=tuple(_VIEWS), default="student")
    p.add_argument("--teacher-view", choices=tuple(_VIEWS), default="aligned")

    p = sub.add_parser("sweep", help="run an ablation grid")
    _common(p)
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--grid", help="comma-separated grid values (default: the axis grid)")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--workers", type=int, default=1, help="parallel cells (default sequential)")
    p.add_argument("--teacher", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--eval-corpus", required=True)
    _add_train_flags(p)
    _add_distill_flags(p)

    p = sub.add_parser("replay", help="re-run a manifest and verify byte-identical outputs")
    p.add_argument("manifest")
    p.add_argument("--out", help="write to this directory instead of the original")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            return cmd_replay(args)
        config = _resolve(args)
        _execute(args.command, config, _out_dir(args, args.command), args.force)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"vldistill: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SelfCheckError as exc:
        print(f"vldistill: self-check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ConfigError, IncompatibleError, CapacityError, CheckpointError, DataLeakError,
            TrainingDiverged) as exc:
        print(f"vldistill: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
