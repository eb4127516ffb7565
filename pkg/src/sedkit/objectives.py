"""Training objectives: ensemble distillation targets and losses, the
contrastive two-model objective, siamese NLI classification and STS
regression with a tunable target lower bound.

The distillation target for a sentence is the plain elementwise mean of
the ensemble members' embeddings; no normalization is applied before or
after averaging. Targets are produced under no_grad, so distillation
updates only the student: member parameter gradients stay exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import encoder as enc
from .diffcore import Tensor
from .encoder import EncoderModel, PoolingSpec
from .errors import DataError, ShapeMismatchError

NLI_LABELS = ("entailment", "neutral", "contradiction")


@dataclass(frozen=True)
class LabeledNliPair:
    premise: str
    hypothesis: str
    label: str

    def __post_init__(self):
        if self.label not in NLI_LABELS:
            raise DataError(f"unknown NLI label: {self.label!r}")


@dataclass(frozen=True)
class CtPair:
    sentence_a: str
    sentence_b: str
    label: int  # 1 identical, 0 non-identical

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError("pair label must be 0 or 1")
        if self.label == 1 and self.sentence_a != self.sentence_b:
            raise DataError("label-1 pairs must repeat the same sentence")


@dataclass(frozen=True)
class RegressionTargetMap:
    """Affine map from gold similarity [0, 5] onto [lower_bound, 1]."""

    lower_bound: float = 0.0
    upper_bound: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lower_bound <= 0.95:
            raise DataError("lower_bound must lie in [0, 0.95]")
        if self.upper_bound != 1.0:
            raise DataError("target upper bound is fixed at 1")

    def target(self, gold: float) -> float:
        if not 0.0 <= gold <= 5.0:
            raise DataError(f"gold score {gold} outside [0, 5]")
        return self.lower_bound + (gold / 5.0) * (1.0 - self.lower_bound)


class EnsembleSpec:
    """Ordered teacher collection sharing one architecture.

    `target_pool` is the pooling used to generate distillation targets;
    the final layer alone by default.
    """

    def __init__(self, members: list[EncoderModel],
                 target_pool: PoolingSpec = PoolingSpec(1)):
        if not members:
            raise DataError("ensemble needs at least one member")
        arch = members[0].arch
        for i, m in enumerate(members):
            if m.arch != arch:
                raise ShapeMismatchError(
                    f"ensemble member {i} architecture {m.arch} differs "
                    f"from member 0 architecture {arch}"
                )
        self.members = list(members)
        self.arch = arch
        self.target_pool = target_pool

    def __len__(self) -> int:
        return len(self.members)


def ensemble_mean_embeddings(ensemble: EnsembleSpec, sentences) -> np.ndarray:
    """Per-sentence mean of member embeddings, shape (B, hidden).

    Computed under no_grad: targets are detached constants.  The member
    outputs are accumulated in a canonical (per-coordinate sorted) order so
    the result is exactly permutation-invariant; a naive running sum can
    differ in the last ulp when members are reordered.
    """
    with dc.no_grad():
        stack = np.stack(
            [
                enc.encode_batch(member, sentences, ensemble.target_pool).data
                for member in ensemble.members
            ]
        )
        stack = np.sort(stack, axis=0, kind="stable")
        acc = stack[0]
        for i in range(1, stack.shape[0]):
            acc = acc + stack[i]
        return acc / len(ensemble)


def ensemble_mean_embedding(ensemble: EnsembleSpec, sentence: str) -> np.ndarray:
    return ensemble_mean_embeddings(ensemble, [sentence])[0]


def sed_loss(target, student_out: Tensor) -> Tensor:
    """Mean squared error between detached targets and student embeddings.

    Accepts a single (D,) pair or batches (B, D); the reduction is the
    mean over every element either way.
    """
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    if target_data.shape != student_out.shape:
        raise ShapeMismatchError(
            f"target shape {target_data.shape} != student shape {student_out.shape}"
        )
    diff = student_out - Tensor(target_data)
    return diff.square().mean()


def ct_loss(model_a: EncoderModel, model_b: EncoderModel, batch,
            pool: PoolingSpec = PoolingSpec(1)) -> Tensor:
    """Binary cross entropy on the inter-model dot product.

    Each pair scores logit = dot(encode_a(s_a), encode_b(s_b)); identical
    pairs are pushed toward high dot product, non-identical toward low.
    Gradients flow into both models.
    """
    batch = list(batch)
    if not batch:
        raise DataError("contrastive batch is empty")
    ua = enc.encode_batch(model_a, [p.sentence_a for p in batch], pool)
    vb = enc.encode_batch(model_b, [p.sentence_b for p in batch], pool)
    logits = (ua * vb).sum(axis=1)
    labels = np.array([p.label for p in batch], dtype=np.float64)
    return dc.bce_with_logits(logits, labels).mean()


@dataclass
class NliHead:
    """Affine classifier over [u; v; |u - v|]; discarded after training."""

    weight: Tensor  # (3 * hidden, 3)
    bias: Tensor  # (3,)

    @classmethod
    def init(cls, hidden: int, seed: int) -> "NliHead":
        rng = np.random.default_rng(seed)
        return cls(
            weight=Tensor(rng.normal(0.0, 0.02, size=(3 * hidden, 3)),
                          requires_grad=True),
            bias=Tensor(np.zeros(3), requires_grad=True),
        )

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def nli_siamese_loss(model: EncoderModel, head: NliHead, batch,
                     pool: PoolingSpec = PoolingSpec(1)) -> Tensor:
    """Mean softmax cross entropy of the siamese 3-way classifier."""
    batch = list(batch)
    if not batch:
        raise DataError("NLI batch is empty")
    u = enc.encode_batch(model, [p.premise for p in batch], pool)
    v = enc.encode_batch(model, [p.hypothesis for p in batch], pool)
    feats = dc.concat([u, v, (u - v).abs()], axis=1)
    logits = feats @ head.weight + head.bias
    targets = np.array([NLI_LABELS.index(p.label) for p in batch])
    return dc.softmax_cross_entropy(logits, targets).mean()


def cosine_tensor(u: Tensor, v: Tensor) -> Tensor:
    """Differentiable rowwise cosine similarity for (B, D) tensors."""
    dot = (u * v).sum(axis=1)
    nu = (u * u).sum(axis=1)
    nv = (v * v).sum(axis=1)
    return dot / (nu * nv).sqrt()


def sts_regression_loss(model: EncoderModel, pairs, target_map: RegressionTargetMap,
                        pool: PoolingSpec = PoolingSpec(1)) -> Tensor:
    """Squared error between pair cosine and the mapped gold target.

    `pairs` is a list of objects with sentence_1, sentence_2 and gold
    attributes; a single pair gives the per-example loss, a batch gives
    the mean.
    """
    pairs = list(pairs)
    if not pairs:
        raise DataError("regression batch is empty")
    u = enc.encode_batch(model, [p.sentence_1 for p in pairs], pool)
    v = enc.encode_batch(model, [p.sentence_2 for p in pairs], pool)
    cos = cosine_tensor(u, v)
    targets = Tensor(np.array([target_map.target(p.gold) for p in pairs]))
    return (cos - targets).square().mean()


@dataclass
class CtBatchSampler:
    """Deterministic stream of contrastive batches.

    Each block pairs one sentence with itself (label 1) and with
    `negatives_per_positive` distinct other sentences (label 0), so a
    batch of size B holds exactly B / (negatives_per_positive + 1)
    positives.
    """

    corpus: list[str] = field(repr=False)
    negatives_per_positive: int = 7
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        self.corpus = list(self.corpus)
        block = self.negatives_per_positive + 1
        if self.batch_size % block != 0:
            raise DataError(
                f"batch size {self.batch_size} not divisible by block size {block}"
            )
        if len(set(self.corpus)) < 2:
            raise DataError("contrastive sampling needs >= 2 distinct sentences")
        counts: dict[str, int] = {}
        for s in self.corpus:
            counts[s] = counts.get(s, 0) + 1
        # every anchor must leave enough non-identical sentences to sample
        if len(self.corpus) - max(counts.values()) < self.negatives_per_positive:
            raise DataError("corpus too small for the requested negative count")

    def __iter__(self):
        rng = np.random.default_rng(self.seed)
        n = len(self.corpus)
        block = self.negatives_per_positive + 1
        positives = self.batch_size // block
        while True:
            batch: list[CtPair] = []
            for _ in range(positives):
                anchor_idx = int(rng.integers(n))
                anchor = self.corpus[anchor_idx]
                batch.append(CtPair(anchor, anchor, 1))
                seen = {anchor_idx}
                for _ in range(self.negatives_per_positive):
                    j = int(rng.integers(n))
                    while j in seen or self.corpus[j] == anchor:
                        j = int(rng.integers(n))
                    seen.add(j)
                    batch.append(CtPair(anchor, self.corpus[j], 0))
            yield batch


def sample_ct_batches(corpus, negatives_per_positive: int, batch_size: int,
                      seed: int = 0):
    """Iterator over contrastive batches; deterministic given seed."""
    return iter(CtBatchSampler(list(corpus), negatives_per_positive,
                               batch_size, seed))
