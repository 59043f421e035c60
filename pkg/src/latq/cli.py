"""Command-line interface chaining the pipeline stages.

Every stage command reads and writes the same artifact layout that
`run_pipeline` produces, so the stages can be run one at a time:

    latq gen-data --out runs/demo --seed 1
    latq train-teacher --out runs/demo
    latq distill --out runs/demo
    latq finetune --out runs/demo
    latq lat-train --out runs/demo
    latq search --out runs/demo
    latq quantize --out runs/demo
    latq eval --checkpoint runs/demo/student_lat.qlml --data runs/demo/data/test.jsonl
    latq pipeline --out runs/demo2 --seed 1

`--config run.json` loads a RunConfig document; `--seed` and `--out`
override its fields. Exit codes: 0 success, 1 usage error (text on
stderr), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, load_params, save_params, save_quantized
from .costmodel import flops_count, flops_ratio, preset
from .data import gen_dataset, load_dataset, save_dataset
from .errors import BudgetInfeasibleError, ConfigError, LatqError
from .model import LengthConfig, ModelParams, init_params
from .pipeline import RunConfig, read_csv, run_pipeline, write_csv
from .quant import collect_stats, evaluate_quantized, quantize_model
from .search import Candidate, evolutionary_search, pick_for_budget
from .training import distill_train, evaluate, finetune_supervised, train_drop_and_restore


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError(message)


def _build_parser() -> _Parser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="RunConfig JSON document")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--out", metavar="DIR", help="artifacts directory override")

    parser = _Parser(prog="latq", description="length-adaptive quantized transformer workbench")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in [
        ("gen-data", "write train/dev/test JSON-lines splits"),
        ("train-teacher", "fine-tune the teacher on the train split"),
        ("distill", "distill attention relations into a fresh student"),
        ("finetune", "fine-tune the student on labeled spans"),
        ("lat-train", "length-adaptive (drop-and-restore) training"),
        ("search", "evolutionary search; writes pareto.csv"),
        ("quantize", "post-training int8 quantization"),
        ("pipeline", "run every stage end to end"),
    ]:
        sub.add_parser(name, parents=[common], help=help_text)

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True, metavar="FILE")
    ev.add_argument("--data", required=True, metavar="FILE", help="JSON-lines records")
    group = ev.add_mutually_exclusive_group()
    group.add_argument("--length-config", metavar="a,b,c", help="retained tokens per layer")
    group.add_argument("--budget-macs", type=int, metavar="N",
                       help="pick the frontier config under this MAC budget")
    ev.add_argument("--pareto", metavar="FILE",
                    help="frontier CSV for --budget-macs (default: next to the checkpoint)")
    ev.add_argument("--max-span-len", type=int, default=8)

    fl = sub.add_parser("flops", parents=[common], help="closed-form MAC count for a preset")
    fl.add_argument("--preset", required=True, choices=["bert-base", "tinybert", "minilm"])
    fl.add_argument("--len", dest="seq_len", type=int, required=True, metavar="N")
    fl.add_argument("--length-config", metavar="a,b,c", help="adaptive token schedule")
    return parser


def _load_run_config(args) -> RunConfig:
    if args.config:
        rc = RunConfig.from_json(Path(args.config).read_text())
    else:
        if not args.out:
            raise ConfigError("need --out (or a --config with out_dir set)")
        rc = RunConfig(out_dir=args.out)
    if args.seed is not None:
        rc = dataclasses.replace(rc, seed=args.seed)
    if args.out:
        rc = dataclasses.replace(rc, out_dir=args.out)
    return rc


def _parse_length_config(text: str) -> LengthConfig:
    try:
        retain = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"bad --length-config {text!r}: expected comma-separated integers")
    return LengthConfig(retain)


def _splits(rc: RunConfig):
    data_dir = Path(rc.out_dir) / "data"
    paths = [data_dir / f"{name}.jsonl" for name in ("train", "dev", "test")]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise ConfigError(f"missing dataset files {missing}; run gen-data first")
    return tuple(load_dataset(p) for p in paths)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {path}; run {producer} first")
    return path


# --------------------------------------------------------------------------
# stage commands (same artifact names as run_pipeline)
# --------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    rc = _load_run_config(args)
    out = Path(rc.out_dir)
    (out / "data").mkdir(parents=True, exist_ok=True)
    train, dev, test = gen_dataset(rc.data, rc.stage_seed("data"))
    for name, split in (("train", train), ("dev", dev), ("test", test)):
        save_dataset(split, out / "data" / f"{name}.jsonl")
    print(f"wrote {len(train)}/{len(dev)}/{len(test)} records under {out / 'data'}")
    return 0


def _cmd_train_teacher(args) -> int:
    rc = _load_run_config(args)
    out = Path(rc.out_dir)
    train, dev, _ = _splits(rc)
    tc = dataclasses.replace(rc.teacher_train, seed=rc.stage_seed("teacher"))
    params, history = finetune_supervised(init_params(rc.teacher_model, rc.stage_seed("teacher")),
                                          train, tc, dev=dev)
    save_params(out / "teacher.qlml", params)
    write_csv(out / "teacher_history.csv", history)
    print(json.dumps(evaluate(params, dev, max_span_len=rc.max_span_len)))
    return 0


def _cmd_distill(args) -> int:
    rc = _load_run_config(args)
    out = Path(rc.out_dir)
    train, _, _ = _splits(rc)
    teacher = load_params(_require(out / "teacher.qlml", "train-teacher"))
    tc = dataclasses.replace(rc.distill_train, seed=rc.stage_seed("distill"))
    student, history = distill_train(teacher, rc.student_model, train, rc.distill, tc)
    save_params(out / "student_distilled.qlml", student)
    write_csv(out / "distill_history.csv", history)
    print(f"distilled student written to {out / 'student_distilled.qlml'}")
    return 0


def _cmd_finetune(args) -> int:
    rc = _load_run_config(args)
    out = Path(rc.out_dir)
    train, dev, _ = _splits(rc)
    student = load_params(_require(out / "student_distilled.qlml", "distill"))
    tc = dataclasses.replace(rc.student_train, seed=rc.stage_seed("finetune"))
    student, history = finetune_supervised(student, train, tc, dev=dev)
    save_params(out / "student_finetuned.qlml", student)
    write_csv(out / "finetune_history.csv", history)
    print(json.dumps(evaluate(student, dev, max_span_len=rc.max_span_len)))
    return 0


def _cmd_lat_train(args) -> int:
    rc = _load_run_config(args)
    out = Path(rc.out_dir)
    train, dev, _ = _splits(rc)
    student = load_params(_require(out / "student_finetuned.qlml", "finetune"))
    tc = dataclasses.replace(rc.lat_train, seed=rc.stage_seed("lat"))
    student, history = train_drop_and_restore(student, train, tc, dev=dev)
    save_params(out / "student_lat.qlml", student)
    write_csv(out / "lat_history.csv", history)
    print(json.dumps(evaluate(student, dev, max_span_len=rc.max_span_len)))
    return 0


def _cmd_search(args) -> int:
    rc = _load_run_config(args)
    out = Path(rc.out_dir)
    _, dev, _ = _splits(rc)
    student = load_params(_require(out / "student_lat.qlml", "lat-train"))
    sc = dataclasses.replace(rc.search, seed=rc.stage_seed("search"), max_span_len=rc.max_span_len)
    front, history = evolutionary_search(student, dev, sc)
    write_csv(out / "search_history.csv", history)
    ref_macs = flops_count(rc.student_model, rc.data.seq_len)
    rows = [{"length_config": str(c.lc), "macs": c.macs,
             "flops_ratio_vs_reference": flops_ratio(ref_macs, c.macs),
             "token_f1": c.accuracy} for c in front]
    write_csv(out / "pareto.csv", rows,
              ["length_config", "macs", "flops_ratio_vs_reference", "token_f1"])
    print(f"{len(front)} frontier configs written to {out / 'pareto.csv'}")
    return 0


def _cmd_quantize(args) -> int:
    rc = _load_run_config(args)
    out = Path(rc.out_dir)
    train, _, _ = _splits(rc)
    student = load_params(_require(out / "student_lat.qlml", "lat-train"))
    stats = collect_stats(student, train[:rc.calibration_records], max_span_len=rc.max_span_len)
    qm = quantize_model(student, stats)
    save_quantized(out / "student_quantized.qlml", qm)
    print(f"quantized model written to {out / 'student_quantized.qlml'} "
          f"({qm.num_bytes() / 2**20:.4f} MiB)")
    return 0


def _cmd_pipeline(args) -> int:
    rc = _load_run_config(args)
    result = run_pipeline(rc, log=lambda msg: print(msg, flush=True))
    for row in result["summary"]:
        print(json.dumps(row))
    return 0


def _front_from_csv(path: Path) -> list[Candidate]:
    rows = read_csv(path)
    if not rows:
        raise ConfigError(f"{path}: empty frontier")
    return [Candidate(_parse_length_config(r["length_config"].replace("-", ",")),
                      int(r["macs"]), float(r["token_f1"])) for r in rows]


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = load_dataset(args.data)
    lc = None
    if args.length_config:
        lc = _parse_length_config(args.length_config)
    elif args.budget_macs is not None:
        pareto_path = Path(args.pareto) if args.pareto else Path(args.checkpoint).parent / "pareto.csv"
        front = _front_from_csv(_require(pareto_path, "search"))
        lc = pick_for_budget(front, args.budget_macs).lc
    if isinstance(model, ModelParams):
        metrics = evaluate(model, records, lc=lc, max_span_len=args.max_span_len)
        num_layers = model.config.num_layers
    else:
        metrics = evaluate_quantized(model, records, lc=lc, max_span_len=args.max_span_len)
        num_layers = model.config.num_layers
    shown_lc = lc if lc is not None else LengthConfig.full(num_layers, len(records[0].tokens))
    print(json.dumps({"length_config": str(shown_lc), **metrics}))
    return 0


def _cmd_flops(args) -> int:
    config, _type_vocab = preset(args.preset)
    lc = _parse_length_config(args.length_config) if args.length_config else None
    macs = flops_count(config, args.seq_len, lc)
    print(f"{macs:.2E}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-teacher": _cmd_train_teacher,
    "distill": _cmd_distill,
    "finetune": _cmd_finetune,
    "lat-train": _cmd_lat_train,
    "search": _cmd_search,
    "quantize": _cmd_quantize,
    "pipeline": _cmd_pipeline,
    "eval": _cmd_eval,
    "flops": _cmd_flops,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    try:
        return _COMMANDS[args.command](args)
    except BudgetInfeasibleError as exc:
        print(f"infeasible budget: {exc}", file=sys.stderr)
        return 2
    except (LatqError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
