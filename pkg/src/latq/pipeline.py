"""End-to-end orchestration: data, teacher, distill, fine-tune, length-adaptive
training, evolutionary search, quantization, and the final cost/accuracy summary.

One RunConfig (a single JSON document) drives the whole run. `seed` is the only
randomness knob: each stage derives its own stream as seed + a fixed offset, so
the per-stage `seed` fields inside the sub-configs are ignored here. Every
artifact lands in `out_dir`:

    run_config.json            the resolved config that produced everything else
    data/{train,dev,test}.jsonl
    teacher.qlml               + teacher_history.csv
    student_distilled.qlml     + distill_history.csv
    student_finetuned.qlml     + finetune_history.csv
    student_lat.qlml           + lat_history.csv
    pareto.csv, search_history.csv
    student_quantized.qlml
    metrics.csv                per-stage full-length dev/test scores
    summary.csv                4 rows: fp32/quantized x full-length/best-budget

A stage that raises halts the run with the stage name; artifacts written by
earlier stages stay on disk.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import save_params, save_quantized
from .costmodel import flops_count, flops_ratio, size_estimate
from .data import GenSettings, gen_dataset, save_dataset
from .errors import ConfigError, PipelineError
from .model import LengthConfig, ModelConfig, init_params, parameter_shapes
from .quant import collect_stats, evaluate_quantized, quantize_model
from .search import SearchConfig, evolutionary_search, pick_for_budget
from .training import (
    DistillConfig,
    TrainConfig,
    distill_train,
    evaluate,
    finetune_supervised,
    train_drop_and_restore,
)

RUN_CONFIG_VERSION = 1

# stage seed = rc.seed + offset; keeps every stage on an independent stream
_SEED_OFFSETS = {"data": 0, "teacher": 1, "distill": 2, "finetune": 3, "lat": 4, "search": 5}


def _toy_teacher() -> ModelConfig:
    return ModelConfig(num_layers=4, hidden_size=64, num_heads=4, ffn_size=128,
                       vocab_size=64, max_positions=48)


def _toy_student() -> ModelConfig:
    return ModelConfig(num_layers=2, hidden_size=32, num_heads=2, ffn_size=64,
                       vocab_size=64, max_positions=48)


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run needs; defaults are the 2-layer toy preset."""

    out_dir: str
    seed: int = 0
    max_span_len: int = 8
    budget_macs: int | None = None  # None: half of the full-length student MACs
    calibration_records: int = 64
    data: GenSettings = field(default_factory=GenSettings)
    teacher_model: ModelConfig = field(default_factory=_toy_teacher)
    student_model: ModelConfig = field(default_factory=_toy_student)
    teacher_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=30, batch_size=8, learning_rate=1e-3, max_span_len=8,
        eval_every=128, stop_at_exact_match=0.98))
    distill: DistillConfig = field(default_factory=lambda: DistillConfig(steps=300))
    distill_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        batch_size=8, learning_rate=1e-3))
    student_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=25, batch_size=8, learning_rate=1e-3, max_span_len=8,
        eval_every=64, stop_at_exact_match=0.99, max_steps=3000))
    lat_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=4, batch_size=8, learning_rate=3e-4, max_span_len=8,
        p_max=0.3, p_layerdrop=0.1, n_random_sandwiches=2))
    search: SearchConfig = field(default_factory=lambda: SearchConfig(
        population_size=16, iterations=12, mutation_prob=0.3,
        mutations_per_iter=10, crossovers_per_iter=10, max_span_len=8))

    def __post_init__(self):
        if not self.out_dir:
            raise ConfigError("out_dir must be set")
        if self.calibration_records < 1:
            raise ConfigError("calibration_records must be >= 1")
        for name, mc in (("teacher_model", self.teacher_model), ("student_model", self.student_model)):
            if mc.vocab_size != self.data.vocab_size:
                raise ConfigError(f"{name}.vocab_size {mc.vocab_size} != data vocab {self.data.vocab_size}")
            if mc.max_positions < self.data.seq_len:
                raise ConfigError(f"{name}.max_positions {mc.max_positions} < seq_len {self.data.seq_len}")

    def to_json(self) -> str:
        doc = {"version": RUN_CONFIG_VERSION, **dataclasses.asdict(self)}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        doc = json.loads(text)
        version = doc.pop("version", RUN_CONFIG_VERSION)
        if version != RUN_CONFIG_VERSION:
            raise ConfigError(f"unsupported run-config version {version}")
        builders = {
            "data": lambda d: GenSettings(**d),
            "teacher_model": lambda d: ModelConfig(**d),
            "student_model": lambda d: ModelConfig(**d),
            "teacher_train": lambda d: TrainConfig(**d),
            "distill": lambda d: DistillConfig(**{**d, "relation_kinds": tuple(d["relation_kinds"])}),
            "distill_train": lambda d: TrainConfig(**d),
            "student_train": lambda d: TrainConfig(**d),
            "lat_train": lambda d: TrainConfig(**d),
            "search": lambda d: SearchConfig(**{
                **d,
                "allowed_values": None if d.get("allowed_values") is None else tuple(d["allowed_values"]),
            }),
        }
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown run-config fields {sorted(unknown)}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in doc:
                continue
            value = doc[f.name]
            try:
                kwargs[f.name] = builders[f.name](value) if f.name in builders else value
            except TypeError as exc:
                raise ConfigError(f"field {f.name!r}: {exc}") from exc
        return cls(**kwargs)

    def stage_seed(self, stage: str) -> int:
        return self.seed + _SEED_OFFSETS[stage]


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    """CSV with a header row; column order is first-seen unless given."""
    if columns is None:
        columns = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="")
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _run_stage(name: str, fn):
    try:
        return fn()
    except Exception as exc:
        raise PipelineError(name, str(exc)) from exc


def run_pipeline(rc: RunConfig, log=None):
    """Execute the full flow; returns {out_dir, summary, front, metrics}."""
    say = log if log is not None else (lambda _msg: None)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(rc.to_json() + "\n")
    span = rc.max_span_len

    say("stage gen-data")
    def _gen():
        train, dev, test = gen_dataset(rc.data, rc.stage_seed("data"))
        (out / "data").mkdir(exist_ok=True)
        save_dataset(train, out / "data" / "train.jsonl")
        save_dataset(dev, out / "data" / "dev.jsonl")
        save_dataset(test, out / "data" / "test.jsonl")
        return train, dev, test
    train, dev, test = _run_stage("gen-data", _gen)
    metrics_rows: list[dict] = []

    def _score(stage: str, params, split_name: str, split) -> dict:
        m = evaluate(params, split, max_span_len=span)
        row = {"stage": stage, "split": split_name,
               "length_config": str(LengthConfig.full(params.config.num_layers, rc.data.seq_len)),
               **m}
        metrics_rows.append(row)
        return m

    say("stage train-teacher")
    def _teacher():
        tc = dataclasses.replace(rc.teacher_train, seed=rc.stage_seed("teacher"))
        params, history = finetune_supervised(init_params(rc.teacher_model, rc.stage_seed("teacher")),
                                              train, tc, dev=dev)
        save_params(out / "teacher.qlml", params)
        write_csv(out / "teacher_history.csv", history)
        return params
    teacher = _run_stage("train-teacher", _teacher)
    _score("teacher", teacher, "dev", dev)

    say("stage distill")
    def _distill():
        tc = dataclasses.replace(rc.distill_train, seed=rc.stage_seed("distill"))
        student, history = distill_train(teacher, rc.student_model, train, rc.distill, tc)
        save_params(out / "student_distilled.qlml", student)
        write_csv(out / "distill_history.csv", history)
        return student
    student = _run_stage("distill", _distill)

    say("stage finetune")
    def _finetune():
        tc = dataclasses.replace(rc.student_train, seed=rc.stage_seed("finetune"))
        trained, history = finetune_supervised(student, train, tc, dev=dev)
        save_params(out / "student_finetuned.qlml", trained)
        write_csv(out / "finetune_history.csv", history)
        return trained
    student = _run_stage("finetune", _finetune)
    _score("finetuned", student, "dev", dev)
    _score("finetuned", student, "test", test)

    say("stage lat-train")
    def _lat():
        tc = dataclasses.replace(rc.lat_train, seed=rc.stage_seed("lat"))
        trained, history = train_drop_and_restore(student, train, tc, dev=dev)
        save_params(out / "student_lat.qlml", trained)
        write_csv(out / "lat_history.csv", history)
        return trained
    student = _run_stage("lat-train", _lat)
    _score("lat", student, "dev", dev)
    _score("lat", student, "test", test)

    say("stage search")
    ref_macs = flops_count(rc.student_model, rc.data.seq_len)
    def _search():
        sc = dataclasses.replace(rc.search, seed=rc.stage_seed("search"), max_span_len=span)
        front, history = evolutionary_search(student, dev, sc)
        write_csv(out / "search_history.csv", history)
        rows = [{
            "length_config": str(c.lc),
            "macs": c.macs,
            "flops_ratio_vs_reference": flops_ratio(ref_macs, c.macs),
            "token_f1": c.accuracy,
        } for c in front]
        write_csv(out / "pareto.csv",
                  rows, ["length_config", "macs", "flops_ratio_vs_reference", "token_f1"])
        return front
    front = _run_stage("search", _search)

    say("stage quantize")
    def _quantize():
        stats = collect_stats(student, train[:rc.calibration_records], max_span_len=span)
        qm = quantize_model(student, stats)
        save_quantized(out / "student_quantized.qlml", qm)
        return qm
    qm = _run_stage("quantize", _quantize)
    q_test = evaluate_quantized(qm, test, max_span_len=span)
    metrics_rows.append({"stage": "quantized", "split": "test",
                         "length_config": str(LengthConfig.full(rc.student_model.num_layers, rc.data.seq_len)),
                         **q_test})
    write_csv(out / "metrics.csv", metrics_rows,
              ["stage", "split", "length_config", "exact_match", "token_f1"])

    say("stage summary")
    def _summary():
        budget = rc.budget_macs if rc.budget_macs is not None else ref_macs // 2
        best = pick_for_budget(front, budget)
        full_lc = LengthConfig.full(rc.student_model.num_layers, rc.data.seq_len)
        shapes = parameter_shapes(rc.student_model)
        fp32_mib = size_estimate(shapes) / 2**20
        quant_mib = qm.num_bytes() / 2**20
        fp32_full = evaluate(student, test, lc=full_lc, max_span_len=span)
        fp32_best = evaluate(student, test, lc=best.lc, max_span_len=span)
        quant_best = evaluate_quantized(qm, test, lc=best.lc, max_span_len=span)
        rows = [
            {"model": "fp32 full-length", "size_mib": fp32_mib,
             "tokens_per_layer": str(full_lc), "token_f1": fp32_full["token_f1"],
             "macs": flops_count(rc.student_model, rc.data.seq_len, full_lc)},
            {"model": "fp32 best-budget", "size_mib": fp32_mib,
             "tokens_per_layer": str(best.lc), "token_f1": fp32_best["token_f1"],
             "macs": flops_count(rc.student_model, rc.data.seq_len, best.lc)},
            {"model": "quantized full-length", "size_mib": quant_mib,
             "tokens_per_layer": str(full_lc), "token_f1": q_test["token_f1"],
             "macs": flops_count(rc.student_model, rc.data.seq_len, full_lc)},
            {"model": "quantized best-budget", "size_mib": quant_mib,
             "tokens_per_layer": str(best.lc), "token_f1": quant_best["token_f1"],
             "macs": flops_count(rc.student_model, rc.data.seq_len, best.lc)},
        ]
        write_csv(out / "summary.csv", rows,
                  ["model", "size_mib", "tokens_per_layer", "token_f1", "macs"])
        return rows
    summary = _run_stage("summary", _summary)
    say("done")
    return {"out_dir": out, "summary": summary, "front": front, "metrics": metrics_rows}
