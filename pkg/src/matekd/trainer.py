"""Training entry points: teacher CE pretraining, generator MLM
pretraining, the plain KD baseline, and the MATE-KD minimax loop.

All loops share one convention: the entry point reseeds torch's global
RNG from the config seed (dropout, init) and draws batch order, masking
and Gumbel noise from a dedicated generator, so a (config, prebuilt
models) pair reproduces its trajectory exactly.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch.optim import AdamW

from .data import PAD_ID, Task, Vocabulary, encode_dataset
from .losses import (adv_loss, ce_loss, generator_objective, kd_baseline_loss,
                     kd_loss, mate_kd_loss)
from .models import (EncoderConfig, MaskedLMGenerator, TransformerClassifier,
                     save_checkpoint, teacher_logits)
from .perturb import generate_pseudo_batch, mask_batch


class TrainerError(ValueError):
    """Raised on invalid training configuration."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the history so far."""

    def __init__(self, message: str, history: "TrainHistory"):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training stage."""

    rho: float = 0.3                 # masking probability
    tau: float = 1.0                 # Gumbel-Softmax temperature
    kd_temperature: float = 2.0      # KD softening temperature
    kd_lambda: float = 0.5           # CE/KD mix, baseline only
    n_gen_steps: int = 10            # maximization steps per cycle
    n_student_steps: int = 100       # minimization steps per cycle
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    generator_lr: float | None = None
    weight_decay: float = 0.01
    seed: int = 0
    eval_every: int = 1              # epochs between dev evaluations
    checkpoint_dir: str | None = None
    max_steps: int | None = None     # optional cap on total optimizer steps
    adv_use_kd_temperature: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise TrainerError("rho must be in [0, 1]")
        if self.tau <= 0 or self.kd_temperature <= 0:
            raise TrainerError("temperatures must be > 0")
        if not 0.0 <= self.kd_lambda <= 1.0:
            raise TrainerError("kd_lambda must be in [0, 1]")
        if self.n_gen_steps < 0:
            raise TrainerError("n_gen_steps must be >= 0")
        if self.n_student_steps < 1:
            raise TrainerError("n_student_steps must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise TrainerError("epochs, batch_size and eval_every must be >= 1")
        if self.lr <= 0:
            raise TrainerError("lr must be > 0")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainerError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    phase: str                      # "max" | "min"
    ce: float | None = None
    kd: float | None = None
    adv: float | None = None
    gen_objective: float | None = None
    lr: float | None = None


@dataclass
class TrainHistory:
    steps: list[StepRecord] = field(default_factory=list)
    dev_metrics: list[tuple[int, float]] = field(default_factory=list)  # (epoch, value)
    best_epoch: int | None = None
    best_metric: float | None = None
    summary: dict = field(default_factory=dict)

    def record(self, **kw) -> None:
        self.steps.append(StepRecord(step=len(self.steps), **kw))

    def phases(self) -> list[str]:
        return [s.phase for s in self.steps]

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.steps:
                fh.write(json.dumps({"kind": "step", **dataclasses.asdict(s)}) + "\n")
            for epoch, value in self.dev_metrics:
                fh.write(json.dumps({"kind": "dev", "epoch": epoch, "metric": value}) + "\n")
            fh.write(json.dumps({"kind": "summary", "best_epoch": self.best_epoch,
                                 "best_metric": self.best_metric, **self.summary}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrainHistory":
        hist = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "step":
                hist.steps.append(StepRecord(**rec))
            elif kind == "dev":
                hist.dev_metrics.append((rec["epoch"], rec["metric"]))
            else:
                hist.best_epoch = rec.pop("best_epoch")
                hist.best_metric = rec.pop("best_metric")
                hist.summary = rec
        return hist


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: TrainHistory
    best_metric: float
    checkpoint_path: Path | None = None


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """Linear decay with no warmup: base_lr * (1 - step / total_steps)."""
    if total_steps < 1:
        raise TrainerError("total_steps must be >= 1")
    if step < 0 or step > total_steps:
        raise TrainerError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps)


def plan_phases(n_batches: int, n_gen: int, n_student: int) -> list[str]:
    """Phase labels for one epoch's batch stream: n_gen max, n_student min, repeat."""
    if n_gen <= 0:
        return ["min"] * n_batches
    phases: list[str] = []
    while len(phases) < n_batches:
        phases += ["max"] * min(n_gen, n_batches - len(phases))
        phases += ["min"] * min(n_student, n_batches - len(phases))
    return phases


def _batch_indices(n: int, batch_size: int, rng: torch.Generator) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=rng)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _accuracy(model, ids: torch.Tensor, labels: torch.Tensor, batch_size: int) -> float:
    was_training = model.training
    model.eval()
    hits = 0
    with torch.no_grad():
        for i in range(0, ids.shape[0], batch_size):
            logits = model(ids[i:i + batch_size])
            hits += int((logits.argmax(dim=-1) == labels[i:i + batch_size]).sum())
    if was_training:
        model.train()
    return hits / ids.shape[0]


def _dev_metric(model, ids, labels, metric: str, batch_size: int) -> float:
    if metric == "accuracy":
        return _accuracy(model, ids, labels, batch_size)
    from .evaluation import compute_metric  # deferred: evaluation imports trainer
    model.eval()
    with torch.no_grad():
        preds = torch.cat([model(ids[i:i + batch_size]).argmax(dim=-1)
                           for i in range(0, ids.shape[0], batch_size)])
    return compute_metric(metric, preds.tolist(), labels.tolist())


class _BestTracker:
    """Highest dev metric wins; ties keep the earliest checkpoint."""

    def __init__(self, model):
        self.model = model
        self.metric = -math.inf
        self.epoch = -1
        self.state = copy.deepcopy(model.state_dict())

    def update(self, metric: float, epoch: int) -> bool:
        if metric > self.metric:
            self.metric, self.epoch = metric, epoch
            self.state = copy.deepcopy(self.model.state_dict())
            return True
        return False

    def restore(self):
        self.model.load_state_dict(self.state)


def _check_finite(value: torch.Tensor, what: str, history: TrainHistory):
    if not torch.isfinite(value).all():
        raise TrainingDiverged(f"non-finite {what}: {value}", history)


def _finish(model, tracker: _BestTracker, history: TrainHistory, config: TrainConfig,
            vocab: Vocabulary, name: str) -> TrainResult:
    tracker.restore()
    model.eval()
    history.best_epoch = tracker.epoch
    history.best_metric = tracker.metric
    path = None
    if config.checkpoint_dir is not None:
        path = save_checkpoint(model, Path(config.checkpoint_dir) / f"{name}.pt", vocab,
                               step=len(history.steps), dev_metric=tracker.metric)
        history.to_jsonl(Path(config.checkpoint_dir) / f"{name}_history.jsonl")
    return TrainResult(model=model, history=history, best_metric=tracker.metric,
                       checkpoint_path=path)


def pretrain_teacher(task: Task, vocab: Vocabulary, encoder_config: EncoderConfig,
                     config: TrainConfig, name: str = "teacher") -> TrainResult:
    """Cross-entropy training of a classifier; keeps the best dev checkpoint."""
    torch.manual_seed(config.seed)
    model = TransformerClassifier(encoder_config)
    rng = torch.Generator().manual_seed(config.seed)
    ids, _, labels = encode_dataset(task.train, vocab, encoder_config.max_len)
    dev_ids, _, dev_labels = encode_dataset(task.dev, vocab, encoder_config.max_len)
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = TrainHistory(summary={"stage": name, "objective": "ce"})
    tracker = _BestTracker(model)
    total_steps = config.epochs * math.ceil(ids.shape[0] / config.batch_size)
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    step = 0
    for epoch in range(config.epochs):
        model.train()
        for idx in _batch_indices(ids.shape[0], config.batch_size, rng):
            if step >= total_steps:
                break
            loss = ce_loss(model(ids[idx]), labels[idx])
            _check_finite(loss, "ce loss", history)
            lr = lr_schedule(step, total_steps, config.lr)
            _set_lr(opt, lr)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.record(phase="min", ce=float(loss), lr=lr)
            step += 1
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            metric = _dev_metric(model, dev_ids, dev_labels, task.metric, config.batch_size)
            history.dev_metrics.append((epoch, metric))
            tracker.update(metric, epoch)
    return _finish(model, tracker, history, config, vocab, name)


def pretrain_generator_mlm(task: Task, vocab: Vocabulary, encoder_config: EncoderConfig,
                           config: TrainConfig) -> TrainResult:
    """Mask-reconstruction pretraining of the generator on the task's texts.

    Only masked positions contribute to the loss; the dev metric is
    masked-token recovery accuracy under the same masking rate.
    """
    torch.manual_seed(config.seed)
    model = MaskedLMGenerator(encoder_config)
    rng = torch.Generator().manual_seed(config.seed)
    ids, maskable, _ = encode_dataset(task.train, vocab, encoder_config.max_len)
    dev_ids, dev_maskable, _ = encode_dataset(task.dev, vocab, encoder_config.max_len)
    opt = AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = TrainHistory(summary={"stage": "generator_mlm", "objective": "masked-ce",
                                    "rho": config.rho})
    tracker = _BestTracker(model)
    total_steps = config.epochs * math.ceil(ids.shape[0] / config.batch_size)
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    step = 0
    for epoch in range(config.epochs):
        model.train()
        for idx in _batch_indices(ids.shape[0], config.batch_size, rng):
            if step >= total_steps:
                break
            masked, mask_bool, _ = mask_batch(ids[idx], maskable[idx], config.rho, rng)
            logits = model(masked)
            if not mask_bool.any():
                continue
            loss = ce_loss(logits[mask_bool], ids[idx][mask_bool])
            _check_finite(loss, "mlm loss", history)
            lr = lr_schedule(step, total_steps, config.lr)
            _set_lr(opt, lr)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.record(phase="min", ce=float(loss), lr=lr)
            step += 1
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            metric = masked_recovery_accuracy(model, dev_ids, dev_maskable, config.rho,
                                              torch.Generator().manual_seed(config.seed),
                                              config.batch_size)
            history.dev_metrics.append((epoch, metric))
            tracker.update(metric, epoch)
    return _finish(model, tracker, history, config, vocab, "generator")


def masked_recovery_accuracy(generator: MaskedLMGenerator, ids: torch.Tensor,
                             maskable: torch.Tensor, rho: float,
                             rng: torch.Generator, batch_size: int = 64) -> float:
    """Fraction of masked tokens whose argmax prediction is the original."""
    was_training = generator.training
    generator.eval()
    hits, total = 0, 0
    with torch.no_grad():
        for i in range(0, ids.shape[0], batch_size):
            chunk, chunk_maskable = ids[i:i + batch_size], maskable[i:i + batch_size]
            masked, mask_bool, _ = mask_batch(chunk, chunk_maskable, rho, rng)
            if not mask_bool.any():
                continue
            preds = generator(masked).argmax(dim=-1)
            hits += int((preds[mask_bool] == chunk[mask_bool]).sum())
            total += int(mask_bool.sum())
    if was_training:
        generator.train()
    return hits / total if total else 0.0


def _freeze(model: torch.nn.Module) -> None:
    model.requires_grad_(False)
    model.eval()


def _count_min_steps(n_batches: int, config: TrainConfig) -> int:
    """Minimization steps over the whole run, honoring the step cap."""
    total, taken = 0, 0
    cap = config.max_steps if config.max_steps is not None else math.inf
    for _ in range(config.epochs):
        for phase in plan_phases(n_batches, config.n_gen_steps, config.n_student_steps):
            if taken >= cap:
                return total
            taken += 1
            if phase == "min":
                total += 1
    return total


def train_kd_baseline(teacher: TransformerClassifier, student: TransformerClassifier,
                      task: Task, vocab: Vocabulary, config: TrainConfig,
                      name: str = "student_kd") -> TrainResult:
    """Knowledge distillation on original samples: (1-l)*CE + l*KD."""
    if teacher.config.max_len != student.config.max_len:
        raise TrainerError("teacher and student must share max_len")
    torch.manual_seed(config.seed)
    rng = torch.Generator().manual_seed(config.seed)
    _freeze(teacher)
    max_len = student.config.max_len
    ids, _, labels = encode_dataset(task.train, vocab, max_len)
    dev_ids, _, dev_labels = encode_dataset(task.dev, vocab, max_len)
    opt = AdamW(student.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    history = TrainHistory(summary={"stage": name, "objective": "kd-baseline",
                                    "kd_lambda": config.kd_lambda,
                                    "kd_temperature": config.kd_temperature})
    tracker = _BestTracker(student)
    total_steps = config.epochs * math.ceil(ids.shape[0] / config.batch_size)
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    step = 0
    for epoch in range(config.epochs):
        student.train()
        for idx in _batch_indices(ids.shape[0], config.batch_size, rng):
            if step >= total_steps:
                break
            s_logits = student(ids[idx])
            t_logits = teacher_logits(teacher, ids[idx])
            ce = ce_loss(s_logits, labels[idx])
            kd = kd_loss(t_logits, s_logits, config.kd_temperature)
            loss = kd_baseline_loss(ce, kd, config.kd_lambda)
            _check_finite(loss, "kd-baseline loss", history)
            lr = lr_schedule(step, total_steps, config.lr)
            _set_lr(opt, lr)
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.record(phase="min", ce=float(ce), kd=float(kd), lr=lr)
            step += 1
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            metric = _dev_metric(student, dev_ids, dev_labels, task.metric, config.batch_size)
            history.dev_metrics.append((epoch, metric))
            tracker.update(metric, epoch)
    return _finish(student, tracker, history, config, vocab, name)


def train_mate_kd(teacher: TransformerClassifier, student: TransformerClassifier,
                  generator: MaskedLMGenerator, task: Task, vocab: Vocabulary,
                  config: TrainConfig, name: str = "student_mate_kd") -> TrainResult:
    """The minimax loop: blocks of generator ascent steps alternating with
    student descent steps over one shuffled batch stream per epoch.

    Maximization updates only the generator (students parameters are
    frozen for the step, gradients reach the generator through the
    relaxed rows); minimization updates only the student on the
    equal-weight CE/KD/ADV loss with pseudo samples regenerated per
    batch. With n_gen_steps=0 the generator stays at its checkpoint and
    pseudo samples are still used.
    """
    if len({teacher.config.max_len, student.config.max_len, generator.config.max_len}) != 1:
        raise TrainerError("teacher, student and generator must share max_len")
    torch.manual_seed(config.seed)
    rng = torch.Generator().manual_seed(config.seed)
    _freeze(teacher)
    max_len = student.config.max_len
    ids, maskable, labels = encode_dataset(task.train, vocab, max_len)
    dev_ids, _, dev_labels = encode_dataset(task.dev, vocab, max_len)
    opt_s = AdamW(student.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    train_generator = config.n_gen_steps > 0
    gen_lr = config.generator_lr if config.generator_lr is not None else config.lr
    opt_g = AdamW(generator.parameters(), lr=gen_lr,
                  weight_decay=config.weight_decay) if train_generator else None
    if not train_generator:
        _freeze(generator)

    history = TrainHistory(summary={
        "stage": name, "objective": "mate-kd", "rho": config.rho, "tau": config.tau,
        "n_gen_steps": config.n_gen_steps, "n_student_steps": config.n_student_steps,
        "pseudo_samples": 0, "stream_policy": "max and min phases share one epoch stream",
    })
    tracker = _BestTracker(student)
    n_batches = math.ceil(ids.shape[0] / config.batch_size)
    total_min_steps = max(1, _count_min_steps(n_batches, config))
    cap = config.max_steps if config.max_steps is not None else math.inf
    step, min_step = 0, 0
    for epoch in range(config.epochs):
        phases = plan_phases(n_batches, config.n_gen_steps, config.n_student_steps)
        for phase, idx in zip(phases, _batch_indices(ids.shape[0], config.batch_size, rng)):
            if step >= cap:
                break
            if phase == "max":
                generator.train()
                student.eval()
                student.requires_grad_(False)
                pseudo = generate_pseudo_batch(generator, ids[idx], maskable[idx],
                                               config.rho, config.tau, rng)
                t_logits = teacher_logits(teacher, pseudo.hard_ids)
                s_logits = student(pseudo.rows, padding_mask=ids[idx].eq(PAD_ID))
                objective = generator_objective(t_logits, s_logits)
                _check_finite(objective, "generator objective", history)
                opt_g.zero_grad()
                (-objective).backward()
                opt_g.step()
                student.requires_grad_(True)
                history.record(phase="max", gen_objective=float(objective), lr=gen_lr)
            else:
                student.train()
                generator.eval()
                with torch.no_grad():
                    pseudo = generate_pseudo_batch(generator, ids[idx], maskable[idx],
                                                   config.rho, config.tau, rng)
                history.summary["pseudo_samples"] += int(idx.shape[0])
                s_orig = student(ids[idx])
                t_orig = teacher_logits(teacher, ids[idx])
                ce = ce_loss(s_orig, labels[idx])
                kd = kd_loss(t_orig, s_orig, config.kd_temperature)
                s_pseudo = student(pseudo.hard_ids)
                t_pseudo = teacher_logits(teacher, pseudo.hard_ids)
                if config.adv_use_kd_temperature:
                    adv = kd_loss(t_pseudo, s_pseudo, config.kd_temperature)
                else:
                    adv = adv_loss(t_pseudo, s_pseudo)
                loss = mate_kd_loss(ce, kd, adv)
                _check_finite(loss, "mate-kd loss", history)
                lr = lr_schedule(min_step, total_min_steps, config.lr)
                _set_lr(opt_s, lr)
                opt_s.zero_grad()
                loss.backward()
                opt_s.step()
                history.record(phase="min", ce=float(ce), kd=float(kd),
                               adv=float(adv), lr=lr)
                min_step += 1
            step += 1
        if (epoch + 1) % config.eval_every == 0 or epoch == config.epochs - 1:
            metric = _dev_metric(student, dev_ids, dev_labels, task.metric, config.batch_size)
            history.dev_metrics.append((epoch, metric))
            tracker.update(metric, epoch)
    return _finish(student, tracker, history, config, vocab, name)
