"""Learning procedures: supervised span fine-tuning, self-attention-relation
distillation, and length-adaptive sandwich training.

The adaptive stage follows the sandwich rule: every step fine-tunes the
full-length model on the task loss while the smallest and a few randomly
sampled length configurations learn to mimic the full pass's span
distributions (inplace distillation, teacher side detached). Stage order is
enforced: distill, then fine-tune, then length-adaptive training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericError, StageOrderError
from .model import (
    LengthConfig,
    ModelParams,
    forward_adaptive,
    forward_full,
    init_params,
    qkv_at_layer,
)
from .rng import make_rng


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 3e-5
    weight_decay: float = 0.01
    seed: int = 0
    p_max: float = 0.2
    p_layerdrop: float = 0.1
    n_random_sandwiches: int = 2
    max_span_len: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    drop_policy: str = "significance"
    sub_model_supervised: bool = False
    max_steps: int | None = None
    eval_every: int = 0  # dev evaluations every k steps; 0 = once per epoch
    stop_at_exact_match: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.p_max < 1.0:
            raise ConfigError(f"p_max must be in [0, 1), got {self.p_max}")
        if not 0.0 <= self.p_layerdrop < 1.0:
            raise ConfigError(f"p_layerdrop must be in [0, 1), got {self.p_layerdrop}")
        if self.n_random_sandwiches < 0:
            raise ConfigError("n_random_sandwiches must be >= 0")


@dataclass
class DistillConfig:
    relation_heads: int = 4
    teacher_layer: int | None = None  # None = teacher's last layer
    relation_kinds: tuple[str, ...] = ("QQ", "KK", "VV")
    steps: int = 400

    def __post_init__(self):
        if self.relation_heads < 1:
            raise ConfigError("relation_heads must be >= 1")
        bad = set(self.relation_kinds) - {"QQ", "KK", "VV"}
        if bad:
            raise ConfigError(f"unknown relation kinds {sorted(bad)}")
        if not self.relation_kinds:
            raise ConfigError("at least one relation kind required")


class Adam:
    """Adam with decoupled weight decay on matrix-shaped tensors."""

    def __init__(self, tensors: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = tensors
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in tensors.items()}

    @classmethod
    def for_params(cls, params: ModelParams, tc: TrainConfig) -> "Adam":
        return cls(params.trainable(), tc.learning_rate, tc.weight_decay,
                   tc.beta1, tc.beta2, tc.adam_eps)

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for name, t in self.tensors.items():
            if t.grad is None:
                continue
            g = t.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            update = (self.m[name] / bias1) / (np.sqrt(self.v[name] / bias2) + self.eps)
            if self.weight_decay and t.data.ndim >= 2:
                update = update + self.weight_decay * t.data
            t.data = t.data - (t.data.dtype.type(self.lr) * update).astype(t.data.dtype)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()


def _batches(n_records: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n_records)
    for i in range(0, n_records, batch_size):
        yield order[i : i + batch_size]


def _span_loss(start: Tensor, end: Tensor, record) -> Tensor:
    return ad.scale(
        ad.add(
            ad.cross_entropy_logits(start, record.answer_start),
            ad.cross_entropy_logits(end, record.answer_end),
        ),
        0.5,
    )


def _check_dataset(dataset) -> None:
    if not dataset:
        raise ConfigError("dataset is empty")
    for i, r in enumerate(dataset):
        if not 0 <= r.answer_start <= r.answer_end < len(r.tokens):
            raise ConfigError(f"record {i}: span ({r.answer_start}, {r.answer_end}) out of bounds")


def supervised_batch_loss(params: ModelParams, batch, max_span_len: int) -> Tensor:
    total = None
    for record in batch:
        _, _, (start, end) = forward_full(params, record.tokens, max_span_len)
        loss = _span_loss(start, end, record)
        total = loss if total is None else ad.add(total, loss)
    return ad.scale(total, 1.0 / len(batch))


def finetune_supervised(params: ModelParams, dataset, tc: TrainConfig, dev=None):
    """Adam fine-tuning on mean start/end cross-entropy. Returns (params, history)."""
    if params.stage not in ("init", "distilled", "finetuned"):
        raise StageOrderError(f"cannot fine-tune parameters in stage {params.stage!r}")
    _check_dataset(dataset)
    rng = make_rng(tc.seed)
    opt = Adam.for_params(params, tc)
    history: list[dict] = []
    step = 0
    done = False
    for epoch in range(tc.epochs):
        for idx in _batches(len(dataset), tc.batch_size, rng):
            batch = [dataset[i] for i in idx]
            opt.zero_grad()
            try:
                loss = supervised_batch_loss(params, batch, tc.max_span_len)
                if not np.isfinite(loss.data):
                    raise NumericError("non-finite loss")
            except NumericError as exc:
                raise NumericError(f"supervised step {step}: {exc}") from None
            ad.backward(loss)
            opt.step()
            row = {"step": step, "epoch": epoch, "loss": float(loss.data)}
            step += 1
            if dev is not None and tc.eval_every and step % tc.eval_every == 0:
                row.update(evaluate(params, dev, max_span_len=tc.max_span_len))
                if tc.stop_at_exact_match is not None and row["exact_match"] >= tc.stop_at_exact_match:
                    done = True
            history.append(row)
            if done or (tc.max_steps is not None and step >= tc.max_steps):
                done = True
                break
        if not done and dev is not None and not tc.eval_every:
            history.append({"step": step, "epoch": epoch,
                            **evaluate(params, dev, max_span_len=tc.max_span_len)})
        if done:
            break
    params.stage = "finetuned"
    return params, history


# ---------------------------------------------------------------------------
# relation distillation
# ---------------------------------------------------------------------------


def minilm_relations(q: Tensor, k: Tensor, v: Tensor, r: int) -> dict[str, Tensor]:
    """Softmax-normalized self-relations of Q, K, V under r relation heads.

    Each input is [m, d] with d divisible by r; every relation is [r, m, m].
    """
    rels = {}
    for kind, x in (("QQ", q), ("KK", k), ("VV", v)):
        m, d = x.shape
        if d % r != 0:
            raise ConfigError(f"width {d} not divisible by {r} relation heads")
        dr = d // r
        heads = ad.transpose(ad.reshape(x, (m, r, dr)), (1, 0, 2))
        scores = ad.scale(ad.bmm(heads, ad.transpose(heads, (0, 2, 1))), 1.0 / np.sqrt(dr))
        rels[kind] = ad.softmax_lastdim(scores)
    return rels


def minilm_distill_loss(teacher_rels: dict[str, Tensor], student_rels: dict[str, Tensor],
                        kinds=("QQ", "KK", "VV")) -> Tensor:
    """Mean over kinds, heads, and rows of KL(teacher_row || student_row)."""
    total = None
    for kind in kinds:
        t, s = teacher_rels[kind], student_rels[kind]
        if t.shape != s.shape:
            raise ContractError(f"relation {kind}: teacher {t.shape} vs student {s.shape}")
        r, m, _ = t.shape
        term = ad.scale(ad.kl_divergence(t.detach(), s), 1.0 / (r * m))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(kinds))


def distill_train(teacher: ModelParams, student_config, corpus, dc: DistillConfig,
                  tc: TrainConfig):
    """Train a fresh student to mimic the teacher's last-layer Q/K/V relations.

    `corpus` is unlabeled: only token sequences are read. Returns
    (student params, history).
    """
    if teacher.stage not in ("finetuned", "length_adaptive"):
        raise StageOrderError(f"teacher must be trained, found stage {teacher.stage!r}")
    if not corpus:
        raise ConfigError("distillation corpus is empty")
    teacher_layer = dc.teacher_layer if dc.teacher_layer is not None else teacher.config.num_layers - 1
    if teacher.config.hidden_size % dc.relation_heads or student_config.hidden_size % dc.relation_heads:
        raise ConfigError("relation heads must divide both teacher and student widths")
    student = init_params(student_config, tc.seed)
    student_layer = student_config.num_layers - 1
    rng = make_rng(tc.seed)
    opt = Adam.for_params(student, tc)
    history: list[dict] = []
    step = 0
    while step < dc.steps:
        for idx in _batches(len(corpus), tc.batch_size, rng):
            if step >= dc.steps:
                break
            batch = [corpus[i] for i in idx]
            opt.zero_grad()
            total = None
            for record in batch:
                tokens = record.tokens if hasattr(record, "tokens") else record
                with ad.no_grad():
                    tq, tk, tv = qkv_at_layer(teacher, tokens, teacher_layer)
                    teacher_rels = minilm_relations(tq, tk, tv, dc.relation_heads)
                sq, sk, sv = qkv_at_layer(student, tokens, student_layer)
                student_rels = minilm_relations(sq, sk, sv, dc.relation_heads)
                loss = minilm_distill_loss(teacher_rels, student_rels, dc.relation_kinds)
                total = loss if total is None else ad.add(total, loss)
            total = ad.scale(total, 1.0 / len(batch))
            if not np.isfinite(total.data):
                raise NumericError(f"non-finite distillation loss at step {step}")
            ad.backward(total)
            opt.step()
            history.append({"step": step, "loss": float(total.data)})
            step += 1
    student.stage = "distilled"
    return student, history


# ---------------------------------------------------------------------------
# length-adaptive training
# ---------------------------------------------------------------------------


def sample_length_config(n: int, L: int, p_max: float, rng: np.random.Generator) -> LengthConfig:
    """LengthDrop sampling: l_i = max(1, floor(m_i * (1 - p_i))), p_i ~ U[0, p_max]."""
    if n < 1:
        raise ConfigError("input length must be >= 1")
    retain = []
    m = n
    for _ in range(L):
        p = rng.uniform(0.0, p_max) if p_max > 0 else 0.0
        m = max(1, int(np.floor(m * (1.0 - p))))
        retain.append(m)
    return LengthConfig(tuple(retain))


def smallest_length_config(n: int, L: int, p_max: float) -> LengthConfig:
    """Repeated application of the maximal drop ratio."""
    retain = []
    m = n
    for _ in range(L):
        m = max(1, int(np.floor(m * (1.0 - p_max))))
        retain.append(m)
    return LengthConfig(tuple(retain))


@dataclass
class SandwichPlan:
    smallest: LengthConfig
    sampled: list[LengthConfig]
    layer_skips: list[list[bool]]  # one mask per sub-model pass

    @property
    def sub_configs(self) -> list[LengthConfig]:
        return [self.smallest] + self.sampled


def plan_sandwich(n: int, L: int, tc: TrainConfig, rng: np.random.Generator) -> SandwichPlan:
    smallest = smallest_length_config(n, L, tc.p_max)
    sampled = [sample_length_config(n, L, tc.p_max, rng) for _ in range(tc.n_random_sandwiches)]
    n_sub = 1 + len(sampled)
    skips = [list(rng.random(L) < tc.p_layerdrop) for _ in range(n_sub)]
    return SandwichPlan(smallest, sampled, skips)


def sandwich_step(params: ModelParams, opt: Adam, batch, tc: TrainConfig,
                  rng: np.random.Generator) -> dict:
    """One optimizer step of full-model task loss + sub-model inplace distillation.

    Sub-models (smallest config + sampled configs) match the detached
    start/end distributions of the full pass; LayerDrop applies to sub-model
    passes only. Returns the loss components.
    """
    if params.stage not in ("finetuned", "length_adaptive"):
        raise StageOrderError(
            f"length-adaptive training requires fine-tuned parameters, found {params.stage!r}"
        )
    opt.zero_grad()
    n_sub = 1 + tc.n_random_sandwiches
    # component sums track the graph's own float32 fold so the degenerate
    # sandwich reports the exact supervised-step loss
    supervised_total = None
    distill_totals: list = [None] * n_sub
    grand: Tensor | None = None
    inv = np.float32(1.0 / len(batch))
    for record in batch:
        n = len(record.tokens)
        plan = plan_sandwich(n, params.config.num_layers, tc, rng)
        _, _, (start_f, end_f) = forward_full(params, record.tokens, tc.max_span_len)
        loss = _span_loss(start_f, end_f, record)
        if not np.isfinite(loss.data):
            raise NumericError("non-finite loss in full-model pass")
        supervised_total = loss.data if supervised_total is None else supervised_total + loss.data
        target_start = ad.softmax_lastdim(start_f.detach())
        target_end = ad.softmax_lastdim(end_f.detach())
        example_total = loss
        for j, lc in enumerate(plan.sub_configs):
            _, _, (start_s, end_s) = forward_adaptive(
                params, record.tokens, lc, tc.max_span_len,
                drop_policy=tc.drop_policy, rng=rng, layer_skip=plan.layer_skips[j],
            )
            kl = ad.scale(
                ad.add(
                    ad.kl_divergence(target_start, ad.softmax_lastdim(start_s)),
                    ad.kl_divergence(target_end, ad.softmax_lastdim(end_s)),
                ),
                0.5,
            )
            sub_loss = kl
            if tc.sub_model_supervised:
                sub_loss = ad.add(sub_loss, _span_loss(start_s, end_s, record))
            if not np.isfinite(sub_loss.data):
                raise NumericError(f"non-finite loss in sub-model pass {j} (lc {lc})")
            distill_totals[j] = kl.data if distill_totals[j] is None else distill_totals[j] + kl.data
            example_total = ad.add(example_total, sub_loss)
        grand = example_total if grand is None else ad.add(grand, example_total)
    grand = ad.scale(grand, 1.0 / len(batch))
    ad.backward(grand)
    opt.step()
    return {
        "supervised_full": float(supervised_total * inv),
        "distill_per_submodel": [float(t * inv) for t in distill_totals],
        "total": float(grand.data),
    }


def train_drop_and_restore(params: ModelParams, dataset, tc: TrainConfig, dev=None):
    """Sandwich training over tc.epochs; returns (length-adaptive params, history)."""
    if params.stage not in ("finetuned", "length_adaptive"):
        raise StageOrderError(
            f"length-adaptive training requires fine-tuned parameters, found {params.stage!r}"
        )
    _check_dataset(dataset)
    rng = make_rng(tc.seed)
    opt = Adam.for_params(params, tc)
    history: list[dict] = []
    step = 0
    done = False
    for epoch in range(tc.epochs):
        for idx in _batches(len(dataset), tc.batch_size, rng):
            batch = [dataset[i] for i in idx]
            parts = sandwich_step(params, opt, batch, tc, rng)
            row = {"step": step, "epoch": epoch, "loss": parts["total"],
                   "supervised_full": parts["supervised_full"]}
            for j, val in enumerate(parts["distill_per_submodel"]):
                row[f"distill_sub{j}"] = val
            history.append(row)
            step += 1
            if tc.max_steps is not None and step >= tc.max_steps:
                done = True
                break
        if dev is not None:
            history.append({"step": step, "epoch": epoch,
                            **evaluate(params, dev, max_span_len=tc.max_span_len)})
        if done:
            break
    params.stage = "length_adaptive"
    return params, history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def span_f1(pred: tuple[int, int], gold: tuple[int, int]) -> float:
    """Token-set F1 of two inclusive spans."""
    p = set(range(pred[0], pred[1] + 1))
    g = set(range(gold[0], gold[1] + 1))
    overlap = len(p & g)
    if overlap == 0:
        return 0.0
    return 2.0 * overlap / (len(p) + len(g))


def evaluate(params: ModelParams, dataset, lc: LengthConfig | None = None,
             max_span_len: int = 16) -> dict[str, float]:
    """{exact_match, token_f1} at full length (lc=None) or under a length config."""
    _check_dataset(dataset)
    em = 0.0
    f1 = 0.0
    with ad.no_grad():
        for record in dataset:
            if lc is None:
                _, pred, _ = forward_full(params, record.tokens, max_span_len)
            else:
                _, pred, _ = forward_adaptive(params, record.tokens, lc, max_span_len)
            gold = (record.answer_start, record.answer_end)
            em += float(pred.span == gold)
            f1 += span_f1(pred.span, gold)
    n = len(dataset)
    return {"exact_match": em / n, "token_f1": f1 / n}
