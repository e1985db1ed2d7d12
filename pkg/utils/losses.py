"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Any, Callable, Literal, NamedTuple

import torch
import torch.nn.functional as F

from .errors import EmptySequenceError, MissingHiddenStatesError, NotNormalizedError, ShapeMismatchError
from .flags import AblationFlags


__all__ = (
    'LossValue',
    'LossWeights',
    'agreement_loss',
    'disentangle_loss',
    'source_loss',
    'diffusion_loss',
    'grad_reverse',
    'grl_lambda',
    'adversarial_domain_loss',
    'adversarial_classification_loss',
)

Reduction = Literal['sum', 'mean']
Tau = float | torch.Tensor

_NORM_TOLERANCE = 1e-4


class LossValue(NamedTuple):
    scalar: torch.Tensor
    components: dict[str, float]

    def __repr__(self) -> str:
        parts = ' '.join(f'{k}={v:.4f}' for k, v in self.components.items())
        return f'<LossValue {float(self.scalar):.4f} {parts}>'


def _check_pair(X: torch.Tensor, Y: torch.Tensor) -> None:
    if X.ndim != 2 or X.shape != Y.shape:
        raise ShapeMismatchError(f'Expected two [B, D] matrices of equal shape, got {tuple(X.shape)} and {tuple(Y.shape)}')
    if X.shape[0] < 1:
        raise EmptySequenceError('Cannot compute a loss over an empty batch.')
    with torch.no_grad():
        for name, m in (('X', X), ('Y', Y)):
            drift = (m.norm(dim=1) - 1.0).abs().max()
            if float(drift) > _NORM_TOLERANCE:
                raise NotNormalizedError(f'Rows of {name} are not unit norm (max drift {float(drift):.2e})')


def agreement_loss(X: torch.Tensor, Y: torch.Tensor, tau: Tau) -> LossValue:
    """Symmetric contrastive cross-entropy with matching rows as targets.

    Both directions are averaged over the batch, so a batch of one is always zero.
    """
    _check_pair(X, Y)
    if float(tau) <= 0:
        raise ValueError(f'tau must be positive, got {float(tau)}')
    logits = X @ Y.T / tau
    targets = torch.arange(X.shape[0], device=X.device)
    loss = 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))
    return LossValue(loss, {'agreement': float(loss)})


def disentangle_loss(X: torch.Tensor, Y: torch.Tensor, *, reduction: Reduction = 'sum') -> LossValue:
    """Sum of squared cosine similarities between paired rows.

    ``reduction='mean'`` divides by the batch size instead.
    """
    _check_pair(X, Y)
    squared = (X * Y).sum(dim=1).square()
    if reduction == 'sum':
        loss = squared.sum()
    elif reduction == 'mean':
        loss = squared.mean()
    else:
        raise ValueError(f'Unknown reduction {reduction!r}')
    return LossValue(loss, {'disentangle': float(loss)})


@dataclasses.dataclass(frozen=True)
class LossWeights:
    c1: float = 1.0
    c2: float = 1.0
    c3: float = 1.0
    c4: float = 1.0
    c5: float = 1.0
    c6: float = 1.0

    def effective(self, flags: AblationFlags) -> LossWeights:
        """Zeroes the components switched off by the ablation flags."""
        changes: dict[str, float] = {}
        if not flags.disentanglement:
            changes.update(c2=0.0, c3=0.0, c4=0.0)
        if not flags.domain_descriptions:
            changes.update(c3=0.0, c4=0.0, c5=0.0, c6=0.0)
        if not flags.mllm_hidden_states:
            changes['c6'] = 0.0
        return dataclasses.replace(self, **changes)

    @property
    def diffusion_active(self) -> bool:
        return any(w != 0.0 for w in (self.c3, self.c4, self.c5, self.c6))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _compose(terms: list[tuple[str, float, Callable[[], LossValue]]], like: torch.Tensor) -> LossValue:
    total: torch.Tensor | None = None
    components: dict[str, float] = {}
    for name, weight, compute in terms:
        if weight == 0.0:
            # not computed at all, so the dropped heads receive no gradient
            components[name] = 0.0
            continue
        term = weight * compute().scalar
        components[name] = float(term)
        total = term if total is None else total + term
    if total is None:
        total = like.new_zeros(())
    return LossValue(total, components)


def source_loss(
    class_emb: torch.Tensor,
    text_emb: torch.Tensor,
    domain_emb: torch.Tensor | None,
    tau: Tau,
    *,
    weights: LossWeights = LossWeights(),
    reduction: Reduction = 'sum',
) -> LossValue:
    """C1 aligns class embeddings with their captions, C2 separates the two image heads."""

    def c2() -> LossValue:
        if domain_emb is None:
            raise ShapeMismatchError('Domain embeddings are required while C2 is active.')
        return disentangle_loss(class_emb, domain_emb, reduction=reduction)

    return _compose(
        [
            ('C1', weights.c1, lambda: agreement_loss(class_emb, text_emb, tau)),
            ('C2', weights.c2, c2),
        ],
        class_emb,
    )


def diffusion_loss(
    class_emb: torch.Tensor,
    domain_emb: torch.Tensor,
    caption_emb: torch.Tensor,
    hidden_emb: torch.Tensor | None,
    tau: Tau,
    *,
    weights: LossWeights = LossWeights(),
    reduction: Reduction = 'sum',
) -> LossValue:
    """Loss for a batch of class-free style images.

    C3 separates the heads, C4 keeps the class head blind to the style caption,
    C5 aligns the domain head with the caption and C6 aligns the caption with
    the projected hidden state it was generated from.
    """

    def c6() -> LossValue:
        if hidden_emb is None:
            raise MissingHiddenStatesError('Hidden states are required unless the hidden-state ablation is active.')
        return agreement_loss(caption_emb, hidden_emb, tau)

    return _compose(
        [
            ('C3', weights.c3, lambda: disentangle_loss(class_emb, domain_emb, reduction=reduction)),
            ('C4', weights.c4, lambda: disentangle_loss(caption_emb, class_emb, reduction=reduction)),
            ('C5', weights.c5, lambda: agreement_loss(caption_emb, domain_emb, tau)),
            ('C6', weights.c6, c6),
        ],
        class_emb,
    )


class GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx: Any, x: torch.Tensor, lam: float) -> torch.Tensor:
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx: Any, grad_output: torch.Tensor) -> tuple[torch.Tensor, None]:
        return grad_output.neg() * ctx.lam, None


def grad_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    if lam < 0:
        raise ValueError(f'lambda must be non-negative, got {lam}')
    return GradReverse.apply(x, lam)  # type: ignore


def grl_lambda(schedule: str, progress: float, lam: float) -> float:
    """Reversal strength at ``progress`` in [0, 1] of training."""
    if schedule == 'constant':
        return lam
    if schedule == 'ramp':
        p = min(max(progress, 0.0), 1.0)
        return lam * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0)
    raise ValueError(f'Unknown GRL schedule {schedule!r}')


def adversarial_domain_loss(
    forget_features: torch.Tensor,
    noise_features: torch.Tensor,
    classifier: Callable[[torch.Tensor], torch.Tensor],
    lam: float,
) -> LossValue:
    """Binary cross-entropy of a forget-vs-noise classifier behind a gradient reversal.

    Forget features carry label 1 and noise features label 0. The classifier
    learns to separate them while the encoder upstream is pushed to confuse it.
    """
    if forget_features.shape[0] == 0 or noise_features.shape[0] == 0:
        raise EmptySequenceError('Both the forget and the noise batch must be non-empty.')
    features = torch.cat([grad_reverse(forget_features, lam), grad_reverse(noise_features, lam)])
    logits = classifier(features).reshape(-1)
    labels = torch.cat(
        [
            torch.ones(forget_features.shape[0], device=logits.device, dtype=logits.dtype),
            torch.zeros(noise_features.shape[0], device=logits.device, dtype=logits.dtype),
        ]
    )
    loss = F.binary_cross_entropy_with_logits(logits, labels)
    return LossValue(loss, {'adversarial': float(loss)})


def adversarial_classification_loss(
    features: torch.Tensor,
    labels: torch.Tensor,
    classifier: Callable[[torch.Tensor], torch.Tensor],
    lam: float,
) -> LossValue:
    """Multi-class variant used by the domain-adversarial baseline."""
    if features.shape[0] == 0:
        raise EmptySequenceError('Cannot compute a loss over an empty batch.')
    loss = F.cross_entropy(classifier(grad_reverse(features, lam)), labels)
    return LossValue(loss, {'domain_adversarial': float(loss)})
