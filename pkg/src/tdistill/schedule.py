"""Epoch planning into Memory/General/Review nodes and the per-node
training dispatch that wires frozen snapshots, the live student, the
Conv-LSTM, and both optimizers together.

After the warmup, epochs repeat in cycles of length k*delta + 1: cycle
offsets {0, delta, ..., (k-1)*delta} are Memory nodes, offset k*delta is
the Review node, everything else is General. A trailing cycle too short
to reach its review node degenerates to General epochs. The memory bank
is cleared at each cycle start, so every review sees exactly the k
snapshots of its own cycle, taken delta epochs apart.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import data as dio
from . import tensor as T
from .distill import (DistillConfig, absolute_increment, attention_map, build_knowledge_sequence,
                      kd_logits_loss, reconcile_extent, spatial_loss, temporal_loss,
                      temporal_loss_pairs)
from .errors import ConfigError, ContractError
from .models import CnnModel, ConvLstm
from .optim import Adam, Sgd
from .tensor import Tensor

VARIANTS = ("vanilla", "kd", "at", "tskd", "tskd_fm")


class NodeKind(str, Enum):
    MEMORY = "M"
    GENERAL = "G"
    REVIEW = "R"


@dataclass(frozen=True)
class TrainingSchedule:
    total_epochs: int
    delta: int
    k: int
    warmup_epochs: int
    kinds: tuple[NodeKind, ...]

    @property
    def cycle_length(self) -> int:
        return self.k * self.delta + 1

    def is_cycle_start(self, epoch: int) -> bool:
        rel = epoch - self.warmup_epochs
        return rel >= 0 and rel % self.cycle_length == 0

    def review_epochs(self) -> list[int]:
        return [e for e, kind in enumerate(self.kinds) if kind is NodeKind.REVIEW]

    def memory_epochs(self) -> list[int]:
        return [e for e, kind in enumerate(self.kinds) if kind is NodeKind.MEMORY]


def build_schedule(total_epochs: int, delta: int, k: int, warmup_epochs: int = 0) -> TrainingSchedule:
    if delta < 1:
        raise ConfigError(f"memory interval delta must be >= 1, got {delta}")
    if k < 1:
        raise ConfigError(f"memory count k must be >= 1, got {k}")
    if warmup_epochs < 0:
        raise ConfigError(f"warmup_epochs must be >= 0, got {warmup_epochs}")
    cycle = k * delta + 1
    if total_epochs < warmup_epochs + cycle:
        warnings.warn(
            f"{total_epochs} epochs leave no room for a review cycle of length {cycle} "
            f"after {warmup_epochs} warmup epochs; the whole run is General", stacklevel=2)
    kinds = []
    for epoch in range(total_epochs):
        rel = epoch - warmup_epochs
        if rel < 0:
            kinds.append(NodeKind.GENERAL)
            continue
        cycle_start = epoch - (rel % cycle)
        if cycle_start + cycle > total_epochs:  # partial trailing cycle
            kinds.append(NodeKind.GENERAL)
            continue
        offset = rel % cycle
        if offset == k * delta:
            kinds.append(NodeKind.REVIEW)
        elif offset % delta == 0:
            kinds.append(NodeKind.MEMORY)
        else:
            kinds.append(NodeKind.GENERAL)
    return TrainingSchedule(total_epochs=total_epochs, delta=delta, k=k,
                            warmup_epochs=warmup_epochs, kinds=tuple(kinds))


def all_general_schedule(total_epochs: int) -> TrainingSchedule:
    return TrainingSchedule(total_epochs=total_epochs, delta=1, k=1, warmup_epochs=total_epochs,
                            kinds=tuple(NodeKind.GENERAL for _ in range(total_epochs)))


class MemoryBank:
    """Bounded FIFO of frozen (epoch, parameter snapshot) entries."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ContractError(f"bank capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.entries: list[tuple[int, dict[str, Tensor]]] = []

    def __len__(self):
        return len(self.entries)

    @property
    def epochs(self) -> list[int]:
        return [e for e, _ in self.entries]

    def append(self, epoch: int, snapshot: dict[str, Tensor]) -> None:
        if self.entries and epoch <= self.entries[-1][0]:
            raise ContractError(f"snapshot epochs must increase: {epoch} after {self.entries[-1][0]}")
        self.entries.append((epoch, snapshot))
        if len(self.entries) > self.capacity:
            self.entries.pop(0)

    def clear(self) -> None:
        self.entries.clear()


def memorize(bank: MemoryBank, schedule: TrainingSchedule, epoch: int, student: CnnModel) -> None:
    """Snapshot the student at a Memory node (deep frozen copy)."""
    if schedule.kinds[epoch] is not NodeKind.MEMORY:
        raise ContractError(f"memorize called at epoch {epoch}, which is {schedule.kinds[epoch].value}, not M")
    bank.append(epoch, student.snapshot())


@dataclass
class StepOutcome:
    loss_task: float
    loss_aux: float | None
    n_correct: int
    per_pair: dict = field(default_factory=dict)


def _count_correct(logits: Tensor, labels: np.ndarray) -> int:
    return int((logits.data.argmax(axis=1) == labels).sum())


def general_step(student: CnnModel, batch_x: Tensor, labels: np.ndarray,
                 optimizer: Sgd, epoch: int) -> StepOutcome:
    """One plain cross-entropy step on the student; nothing else moves."""
    with T.scoped_graph():
        logits, _ = student.forward(batch_x)
        loss = T.softmax_cross_entropy(logits, labels)
        T.backward(loss)
        optimizer.step(epoch)
        return StepOutcome(loss_task=loss.item(), loss_aux=None, n_correct=_count_correct(logits, labels))


def kd_step(student: CnnModel, teacher: CnnModel, batch_x: Tensor, labels: np.ndarray,
            optimizer: Sgd, epoch: int, cfg: DistillConfig) -> StepOutcome:
    """Classic logits distillation: soft teacher targets every batch."""
    with T.scoped_graph():
        with T.no_grad():
            teacher_logits, _ = teacher.forward(batch_x)
        logits, _ = student.forward(batch_x)
        task = T.softmax_cross_entropy(logits, labels)
        loss = kd_logits_loss(logits, teacher_logits, labels,
                              temperature=cfg.kd_temperature, alpha=cfg.kd_alpha)
        T.backward(loss)
        optimizer.step(epoch)
        return StepOutcome(loss_task=task.item(), loss_aux=loss.item(),
                           n_correct=_count_correct(logits, labels))


def at_step(student: CnnModel, teacher: CnnModel, batch_x: Tensor, labels: np.ndarray,
            optimizer: Sgd, epoch: int, cfg: DistillConfig) -> StepOutcome:
    """Attention-transfer baseline: CE + beta * spatial map distance."""
    with T.scoped_graph():
        with T.no_grad():
            _, teacher_taps = teacher.forward(batch_x)
        logits, taps = student.forward(batch_x)
        task = T.softmax_cross_entropy(logits, labels)
        spatial = spatial_loss(taps, teacher_taps, cfg.layer_pairs, normalize=cfg.normalize_maps)
        loss = T.add(task, T.scale(spatial, cfg.at_beta))
        T.backward(loss)
        optimizer.step(epoch)
        return StepOutcome(loss_task=task.item(), loss_aux=spatial.item(),
                           n_correct=_count_correct(logits, labels))


def review_step(student: CnnModel, teacher: CnnModel, bank: MemoryBank, lstm: ConvLstm,
                batch_x: Tensor, labels: np.ndarray, cfg: DistillConfig,
                student_opt: Sgd, lstm_opt: Adam, epoch: int) -> StepOutcome:
    """The review computation: forward the batch through the k frozen
    snapshots, the live student, and the frozen teacher; per layer pair,
    build the knowledge sequence, predict the next increment, and measure
    it against the teacher-derived absolute increment.

    The Conv-LSTM is updated with the unscaled temporal loss; the student
    with task + lam * temporal. With lam == 0 the student's connection to
    the temporal graph is cut structurally, so its update is bit-identical
    to a general step.
    """
    if len(bank) != cfg.k:
        raise ContractError(f"review at epoch {epoch} needs a full bank of {cfg.k}, got {len(bank)}")
    live_in_graph = cfg.lam != 0.0
    with T.scoped_graph():
        with T.no_grad():
            _, teacher_taps = teacher.forward(batch_x)
            snap_taps = []
            for snap_epoch, snap_params in bank.entries:
                _, staps = CnnModel(student.spec, params=snap_params).forward(batch_x)
                snap_taps.append((snap_epoch, staps))
        logits, live_taps = student.forward(batch_x)
        task = T.softmax_cross_entropy(logits, labels)

        pair_losses: dict[tuple[str, str], Tensor] = {}
        for s_name, t_name in cfg.layer_pairs:
            live_tap = live_taps[s_name] if live_in_graph else live_taps[s_name].detach()
            live_map = attention_map(live_tap, normalize=cfg.normalize_maps)
            teacher_map = attention_map(teacher_taps[t_name], normalize=cfg.normalize_maps)
            snap_maps = [attention_map(staps[s_name], normalize=cfg.normalize_maps)
                         for _, staps in snap_taps]
            epochs = [e for e, _ in snap_taps] + [epoch]

            if cfg.sequence_mode == "increments":
                seq = build_knowledge_sequence(snap_maps + [live_map], epochs, mode="increments")
            else:
                seq = build_knowledge_sequence(snap_maps[1:] + [live_map], epochs[1:], mode="feature_maps")
            n, hh, ww = seq.entries[0].shape
            pred = lstm.predict([T.reshape(entry, (n, 1, hh, ww)) for entry in seq.entries])
            target = absolute_increment(teacher_map, live_map, detach_target=cfg.detach_target)
            if pred.shape != target.values.shape:
                pred = reconcile_extent(pred, target.values.shape[1:])
            pair_losses[(s_name, t_name)] = temporal_loss(pred, target)

        l_temporal = temporal_loss_pairs(list(pair_losses.values()))
        task_value, temporal_value = task.item(), l_temporal.item()
        if not (np.isfinite(task_value) and np.isfinite(temporal_value)):
            dump = {f"{s}->{t}": loss.item() for (s, t), loss in pair_losses.items()}
            raise RuntimeError(
                f"non-finite review loss at epoch {epoch}: task={task_value}, "
                f"temporal={temporal_value}, per-layer={dump}")

        T.backward(l_temporal)
        if live_in_graph and cfg.lam != 1.0:
            for p in student.params.values():
                if p.grad is not None:
                    p.grad = p.grad * p.data.dtype.type(cfg.lam)
        T.backward(task)
        student_opt.step(epoch)
        lstm_opt.step()
        return StepOutcome(loss_task=task_value, loss_aux=temporal_value,
                           n_correct=_count_correct(logits, labels),
                           per_pair={f"{s}->{t}": loss.item() for (s, t), loss in pair_losses.items()})


def evaluate(model: CnnModel, dataset: dio.Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy, fixed batch order, no gradients."""
    correct = 0
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = Tensor(dataset.images[start:start + batch_size])
            labels = dataset.labels[start:start + batch_size]
            logits, _ = model.forward(x)
            correct += _count_correct(logits, labels)
    return correct / len(dataset)


def run_training(student: CnnModel, teacher: CnnModel | None, lstm: ConvLstm | None,
                 schedule: TrainingSchedule, train_set: dio.Dataset, test_set: dio.Dataset,
                 cfg: DistillConfig, student_opt: Sgd, lstm_opt: Adam | None,
                 variant: str, batch_size: int, data_rng: np.random.Generator,
                 on_epoch=None, state_dir=None, start_epoch: int = 0,
                 bank: MemoryBank | None = None) -> list[dio.EpochRecord]:
    """Iterate the schedule, dispatching per node kind; returns one record
    per epoch. ``on_epoch`` (if given) receives each record as it is made;
    ``state_dir`` (if given) receives a resumable state file per epoch."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; known: {VARIANTS}")
    needs_teacher = variant in ("kd", "at", "tskd", "tskd_fm")
    if needs_teacher and teacher is None:
        raise ContractError(f"variant {variant!r} needs a teacher")
    is_review_variant = variant in ("tskd", "tskd_fm")
    if is_review_variant and (lstm is None or lstm_opt is None):
        raise ContractError(f"variant {variant!r} needs a Conv-LSTM and its optimizer")
    if bank is None:
        bank = MemoryBank(cfg.k)

    records: list[dio.EpochRecord] = []
    for epoch in range(start_epoch, schedule.total_epochs):
        kind = schedule.kinds[epoch]
        if is_review_variant and schedule.is_cycle_start(epoch):
            bank.clear()

        perm = data_rng.permutation(len(train_set))
        loss_task_sum = 0.0
        loss_temporal_sum = 0.0
        n_review_batches = 0
        n_correct = 0
        n_batches = 0
        elapsed = 0.0
        for start in range(0, len(perm), batch_size):
            idx = perm[start:start + batch_size]
            batch_x = Tensor(train_set.images[idx])
            labels = train_set.labels[idx]
            t0 = time.perf_counter()
            if kind is NodeKind.REVIEW and is_review_variant:
                out = review_step(student, teacher, bank, lstm, batch_x, labels, cfg,
                                  student_opt, lstm_opt, epoch)
                loss_temporal_sum += out.loss_aux
                n_review_batches += 1
            elif variant == "kd":
                out = kd_step(student, teacher, batch_x, labels, student_opt, epoch, cfg)
            elif variant == "at":
                out = at_step(student, teacher, batch_x, labels, student_opt, epoch, cfg)
            else:
                out = general_step(student, batch_x, labels, student_opt, epoch)
            elapsed += time.perf_counter() - t0
            loss_task_sum += out.loss_task
            n_correct += out.n_correct
            n_batches += 1

        if kind is NodeKind.MEMORY and is_review_variant:
            memorize(bank, schedule, epoch, student)

        record = dio.EpochRecord(
            epoch=epoch,
            node_kind=kind.value,
            loss_task=loss_task_sum / n_batches,
            loss_temporal=(loss_temporal_sum / n_review_batches) if n_review_batches else None,
            train_acc=n_correct / len(train_set),
            test_acc=evaluate(student, test_set, batch_size=max(batch_size, 256)),
            lr=student_opt.lr_at(epoch),
            ms_per_batch=1000.0 * elapsed / n_batches,
        )
        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if state_dir is not None:
            save_run_state(state_dir, epoch + 1, student, lstm, student_opt, lstm_opt, bank, data_rng)
    return records


# ---------------------------------------------------------------------------
# resumable state


def save_run_state(state_dir, next_epoch: int, student: CnnModel, lstm: ConvLstm | None,
                   student_opt: Sgd, lstm_opt: Adam | None, bank: MemoryBank,
                   data_rng: np.random.Generator) -> None:
    state_dir = Path(state_dir)
    state_dir.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for name, arr in student.state_arrays().items():
        arrays[f"student.{name}"] = arr
    for name, arr in student_opt.state_arrays().items():
        arrays[f"student_opt.{name}"] = arr
    if lstm is not None:
        for name, arr in lstm.state_arrays().items():
            arrays[f"lstm.{name}"] = arr
    if lstm_opt is not None:
        for name, arr in lstm_opt.state_arrays().items():
            arrays[f"lstm_opt.{name}"] = arr
    for slot, (snap_epoch, snap) in enumerate(bank.entries):
        for name, t in snap.items():
            arrays[f"bank.{slot}.{name}"] = t.data
    dio.save_checkpoint(arrays, state_dir / "run_state.ckpt")
    manifest = {
        "next_epoch": next_epoch,
        "bank_epochs": bank.epochs,
        "data_rng_state": data_rng.bit_generator.state,
    }
    (state_dir / "run_state.json").write_text(json.dumps(manifest))


def load_run_state(state_dir, student: CnnModel, lstm: ConvLstm | None,
                   student_opt: Sgd, lstm_opt: Adam | None, bank: MemoryBank,
                   data_rng: np.random.Generator) -> int:
    """Restore a saved run in place; returns the epoch to continue from."""
    state_dir = Path(state_dir)
    manifest = json.loads((state_dir / "run_state.json").read_text())
    arrays = dio.load_checkpoint(state_dir / "run_state.ckpt")
    pick = lambda prefix: {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    student.load_state_arrays(pick("student."))
    student_opt.load_state_arrays(pick("student_opt."))
    if lstm is not None:
        lstm.load_state_arrays(pick("lstm."))
    if lstm_opt is not None:
        lstm_opt.load_state_arrays(pick("lstm_opt."))
    bank.clear()
    dtype = T.get_default_dtype()
    for slot, snap_epoch in enumerate(manifest["bank_epochs"]):
        snap = {name: Tensor(arr.astype(dtype), requires_grad=False)
                for name, arr in pick(f"bank.{slot}.").items()}
        bank.append(snap_epoch, snap)
    state = manifest["data_rng_state"]
    state["state"]["state"] = int(state["state"]["state"])
    state["state"]["inc"] = int(state["state"]["inc"])
    data_rng.bit_generator.state = state
    return int(manifest["next_epoch"])
