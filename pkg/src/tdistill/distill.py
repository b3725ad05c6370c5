"""Distillation mathematics: attention maps, knowledge increments and
sequences, the temporal loss, and the classic logits/spatial baselines.

An attention map is the channel-wise sum of squared activations of a
[N,C,H,W] feature tensor, optionally L2-normalized per sample. A
knowledge increment is the elementwise absolute difference between two
attention maps of the same layer at different training states; the
absolute increment compares the live student against the frozen teacher
and acts as the dynamic prediction target.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor

SEQUENCE_MODES = ("increments", "feature_maps")


@dataclass
class AttentionMap:
    values: Tensor  # [N,H,W], nonnegative
    normalized: bool


@dataclass
class KnowledgeIncrement:
    values: Tensor  # [N,H,W], nonnegative
    span: tuple[int, int] | str  # (epoch_a, epoch_b) or "absolute"


@dataclass
class KnowledgeSequence:
    entries: list[Tensor]  # k tensors of identical [N,H,W] shape
    spans: list[tuple[int, int]]

    def __len__(self):
        return len(self.entries)


@dataclass
class DistillConfig:
    lam: float = 1.0                # weight of the auxiliary loss in the student objective
    k: int = 3                      # memory states per review
    delta: int = 5                  # epochs between memory nodes
    layer_pairs: list[tuple[str, str]] = field(
        default_factory=lambda: [("stage1", "stage1"), ("stage2", "stage2"), ("stage3", "stage3")])
    sequence_mode: str = "increments"
    normalize_maps: bool = True
    detach_target: bool = False
    kd_temperature: float = 4.0
    kd_alpha: float = 0.9
    at_beta: float = 1000.0

    def validate(self) -> list[str]:
        problems = []
        if self.lam < 0:
            problems.append(f"lam must be >= 0, got {self.lam}")
        if self.k < 1:
            problems.append(f"k must be >= 1, got {self.k}")
        if self.delta < 1:
            problems.append(f"delta must be >= 1, got {self.delta}")
        if not self.layer_pairs:
            problems.append("layer_pairs must be nonempty")
        if self.sequence_mode not in SEQUENCE_MODES:
            problems.append(f"sequence_mode must be one of {SEQUENCE_MODES}, got {self.sequence_mode!r}")
        if self.kd_temperature <= 0:
            problems.append(f"kd_temperature must be > 0, got {self.kd_temperature}")
        if not 0.0 <= self.kd_alpha <= 1.0:
            problems.append(f"kd_alpha must be in [0, 1], got {self.kd_alpha}")
        return problems


def attention_map(features: Tensor, normalize: bool = True) -> AttentionMap:
    """Collapse [N,C,H,W] features to a [N,H,W] map of summed squared
    channels; optionally divide each sample by its flattened L2 norm
    (identically-zero maps are left as zero)."""
    if features.data.ndim != 4:
        raise DimensionError(f"attention_map needs [N,C,H,W] features, got shape {features.shape}")
    values = T.sum_channels(T.square(features))
    if normalize:
        values = T.normalize_l2_per_sample(values)
    return AttentionMap(values=values, normalized=normalize)


def knowledge_increment(map_a: AttentionMap, map_b: AttentionMap,
                        span: tuple[int, int] | str = (0, 0)) -> KnowledgeIncrement:
    """|map_b - map_a| elementwise; map_a is the earlier state."""
    if map_a.values.shape != map_b.values.shape:
        raise ContractError(
            f"increment between maps of different shape: {map_a.values.shape} vs {map_b.values.shape}")
    if map_a.normalized != map_b.normalized:
        raise ContractError("increment between maps with different normalization flags")
    return KnowledgeIncrement(values=T.abs_(T.sub(map_b.values, map_a.values)), span=span)


def build_knowledge_sequence(maps: list[AttentionMap], epochs: list[int],
                             mode: str = "increments") -> KnowledgeSequence:
    """Assemble the Conv-LSTM input from state maps ordered by epoch.

    In increment mode, k+1 maps produce k consecutive-pair increments;
    in feature-map mode the k maps themselves form the sequence.
    """
    if mode not in SEQUENCE_MODES:
        raise ContractError(f"unknown sequence mode {mode!r}")
    if len(maps) != len(epochs):
        raise ContractError(f"{len(maps)} maps but {len(epochs)} epochs")
    if len(maps) < (2 if mode == "increments" else 1):
        raise ContractError(f"sequence needs at least {'2 maps' if mode == 'increments' else '1 map'}")
    shape0 = maps[0].values.shape
    for m in maps:
        if m.values.shape != shape0:
            raise ContractError(f"ragged maps: {m.values.shape} vs {shape0}")
    if list(epochs) != sorted(epochs):
        raise ContractError(f"epochs must be increasing, got {epochs}")

    if mode == "increments":
        entries, spans = [], []
        for a, b in zip(range(len(maps) - 1), range(1, len(maps))):
            inc = knowledge_increment(maps[a], maps[b], span=(epochs[a], epochs[b]))
            entries.append(inc.values)
            spans.append((epochs[a], epochs[b]))
        return KnowledgeSequence(entries=entries, spans=spans)
    return KnowledgeSequence(entries=[m.values for m in maps],
                             spans=[(e, e) for e in epochs])


def reconcile_extent(values: Tensor, target_hw: tuple[int, int]) -> Tensor:
    """Average-pool a [N,H,W] map down to target_hw (must divide evenly)."""
    n, h, w = values.shape
    th, tw = target_hw
    if (h, w) == (th, tw):
        return values
    if h < th or w < tw or h % th or w % tw or h // th != w // tw:
        raise ContractError(f"cannot reconcile map extent {h}x{w} to {th}x{tw} by integer pooling")
    pooled = T.avg_pool2d(T.reshape(values, (n, 1, h, w)), h // th)
    return T.reshape(pooled, (n, th, tw))


def absolute_increment(teacher_map: AttentionMap, student_map: AttentionMap,
                       detach_target: bool = False) -> KnowledgeIncrement:
    """|teacher - student| at a common extent; the dynamic review target.

    When the extents differ, the larger map is average-pooled down. With
    ``detach_target`` the student side is cut out of the graph, so the
    target stops feeding gradients back into the student.
    """
    tv, sv = teacher_map.values, student_map.values
    if teacher_map.normalized != student_map.normalized:
        raise ContractError("teacher/student maps with different normalization flags")
    if tv.shape[0] != sv.shape[0]:
        raise ContractError(f"batch mismatch: teacher {tv.shape} vs student {sv.shape}")
    target_hw = (min(tv.shape[1], sv.shape[1]), min(tv.shape[2], sv.shape[2]))
    tv = reconcile_extent(tv, target_hw)
    sv = reconcile_extent(sv, target_hw)
    if detach_target:
        sv = sv.detach()
    return KnowledgeIncrement(values=T.abs_(T.sub(tv, sv)), span="absolute")


def temporal_loss(pred: Tensor, target: KnowledgeIncrement) -> Tensor:
    """Mean over batch and spatial elements of the squared prediction gap."""
    if pred.shape != target.values.shape:
        raise ContractError(f"prediction shape {pred.shape} != target shape {target.values.shape}")
    return T.mean_all(T.square(T.sub(pred, target.values)))


def temporal_loss_pairs(pair_losses: list[Tensor]) -> Tensor:
    if not pair_losses:
        raise ContractError("no layer-pair losses to sum")
    total = pair_losses[0]
    for term in pair_losses[1:]:
        total = T.add(total, term)
    return total


def spatial_loss(student_taps: dict[str, Tensor], teacher_taps: dict[str, Tensor],
                 layer_pairs: list[tuple[str, str]], normalize: bool = True) -> Tensor:
    """Attention-transfer style distance, summed over layer pairs."""
    terms = []
    for s_name, t_name in layer_pairs:
        if s_name not in student_taps:
            raise ContractError(f"student tap {s_name!r} missing; have {sorted(student_taps)}")
        if t_name not in teacher_taps:
            raise ContractError(f"teacher tap {t_name!r} missing; have {sorted(teacher_taps)}")
        s_map = attention_map(student_taps[s_name], normalize=normalize)
        t_map = attention_map(teacher_taps[t_name], normalize=normalize)
        sv, tv = s_map.values, t_map.values
        target_hw = (min(sv.shape[1], tv.shape[1]), min(sv.shape[2], tv.shape[2]))
        sv = reconcile_extent(sv, target_hw)
        tv = reconcile_extent(tv, target_hw)
        terms.append(T.mean_all(T.square(T.sub(sv, tv))))
    return temporal_loss_pairs(terms)


def kd_logits_loss(student_logits: Tensor, teacher_logits: Tensor, labels,
                   temperature: float = 4.0, alpha: float = 0.9) -> Tensor:
    """(1-a)*CE(student, labels) + a*T^2*KL(softmax(teacher/T) || softmax(student/T)).

    The KL term is averaged over the batch; the teacher side is constant.
    """
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(
            f"logit shape mismatch: student {student_logits.shape} vs teacher {teacher_logits.shape}")
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    n = student_logits.shape[0]
    dtype = student_logits.data.dtype

    z = teacher_logits.data / dtype.type(temperature)
    z = z - z.max(axis=1, keepdims=True)
    logp_t = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p_t = np.exp(logp_t)
    entropy_term = float((p_t * logp_t).sum() / n)  # sum_b p log p / N, constant

    logq_s = T.log_softmax(T.scale(student_logits, 1.0 / temperature))
    cross = T.scale(T.sum_all(T.mul(T.Tensor(p_t, dtype=dtype), logq_s)), -1.0 / n)
    kl = T.add(cross, T.Tensor(np.asarray(entropy_term, dtype=dtype)))

    ce = T.softmax_cross_entropy(student_logits, labels)
    return T.add(T.scale(ce, 1.0 - alpha), T.scale(kl, alpha * temperature * temperature))


def student_loss(task: Tensor, aux: Tensor, lam: float) -> Tensor:
    """task + lam*aux; both must be scalars."""
    if task.data.size != 1 or aux.data.size != 1:
        raise ContractError("student_loss needs scalar losses")
    return T.add(task, T.scale(aux, lam))
