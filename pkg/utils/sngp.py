"""
This Source Code Form is subject to the terms of the Mozilla Public
License, v. 2.0. If a copy of the MPL was not distributed with this
file, You can obtain one at http://mozilla.org/MPL/2.0/.

Distance-aware uncertainty head: spectral-normalised residual layer, random
Fourier features and a Laplace-approximated Gaussian-process output layer.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

from .errors import DegenerateStatisticError, DomainTooSmallError, ShapeMismatchError, UnfittedHeadError
from .seeding import seeded


__all__ = ('SNGPConfig', 'SpectralLinear', 'SNGPHead', 'fit_sngp')

log = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class SNGPConfig:
    hidden_width: int = 128
    norm_bound: float = 0.95
    n_features: int = 1024
    ridge: float = 1e-6
    prior_scale: float = 1.0
    lengthscale: float | None = None
    mean_field_factor: float = math.pi / 8
    epochs: int = 200
    lr: float = 1e-2
    weight_decay: float = 1e-4
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


class SpectralLinear(nn.Linear):
    """A linear layer whose weight is rescaled so its largest singular value is at most ``bound``."""

    def __init__(self, in_features: int, out_features: int, bound: float) -> None:
        super().__init__(in_features, out_features)
        self.bound = bound

    def normalized_weight(self) -> torch.Tensor:
        sigma = torch.linalg.matrix_norm(self.weight, ord=2)
        return self.weight * torch.clamp(self.bound / sigma, max=1.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.normalized_weight(), self.bias)


class SNGPHead(nn.Module):
    def __init__(self, in_features: int, n_classes: int, config: SNGPConfig) -> None:
        super().__init__()
        self.config = config
        self.in_features = in_features
        self.n_classes = n_classes
        width = config.hidden_width
        lengthscale = config.lengthscale or math.sqrt(width / 2)

        self.input = SpectralLinear(in_features, width, config.norm_bound)
        self.residual = SpectralLinear(width, width, config.norm_bound)
        # frozen random Fourier projection
        self.register_buffer('omega', torch.randn(config.n_features, width) / lengthscale)
        self.register_buffer('phase', torch.rand(config.n_features) * 2 * math.pi)
        self.output = nn.Linear(config.n_features, n_classes, bias=False)
        self.register_buffer('precision', torch.empty(0, dtype=torch.float64))
        self.register_buffer('covariance', torch.empty(0, dtype=torch.float64))

    def __repr__(self) -> str:
        return (
            f'<SNGPHead in={self.in_features} classes={self.n_classes} '
            f'features={self.config.n_features} fitted={self.fitted}>'
        )

    @property
    def fitted(self) -> bool:
        return self.covariance.numel() > 0

    def spectral_norms(self) -> list[float]:
        with torch.no_grad():
            return [float(torch.linalg.matrix_norm(m.normalized_weight(), ord=2)) for m in (self.input, self.residual)]

    def random_features(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatchError(f'Expected features of shape [N, {self.in_features}], got {tuple(x.shape)}')
        h = self.input(x)
        h = h + F.relu(self.residual(h))
        h = F.layer_norm(h, (h.shape[-1],))
        return math.sqrt(2.0 / self.config.n_features) * torch.cos(h @ self.omega.T + self.phase)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.output(self.random_features(x))

    def predict(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Mean logits and the posterior predictive variance per sample, both float64."""
        if not self.fitted:
            raise UnfittedHeadError('The SNGP head has no posterior covariance yet; fit it first.')
        with torch.no_grad():
            phi = self.random_features(x.float()).double()
            logits = phi @ self.output.weight.double().T
            variance = ((phi @ self.covariance) * phi).sum(dim=1)
        return logits, variance

    def uncertainty(self, x: torch.Tensor) -> torch.Tensor:
        """Dempster-Shafer uncertainty ``K / (K + sum exp(logit))`` on mean-field adjusted logits."""
        logits, variance = self.predict(x)
        adjusted = logits / torch.sqrt(1.0 + self.config.mean_field_factor * variance)[:, None]
        k = float(self.n_classes)
        return k / (k + torch.exp(adjusted).sum(dim=1))


def _invert_precision(precision: torch.Tensor, ridge: float) -> tuple[torch.Tensor, torch.Tensor]:
    eye = torch.eye(precision.shape[0], dtype=precision.dtype)
    jitter = ridge
    for _ in range(10):
        regularized = precision + jitter * eye
        factor, info = torch.linalg.cholesky_ex(regularized)
        if int(info) == 0:
            return regularized, torch.cholesky_inverse(factor)
        log.warning('Precision matrix not positive definite with jitter %.1e, retrying', jitter)
        jitter *= 10.0
    raise DegenerateStatisticError('Precision matrix stayed singular after regularisation.')


def fit_sngp(features: torch.Tensor, labels: torch.Tensor, config: SNGPConfig, *, n_classes: int | None = None) -> SNGPHead:
    """Trains a head on the anchor features, then accumulates the Laplace precision in one pass."""
    if features.ndim != 2 or labels.shape != (features.shape[0],):
        raise ShapeMismatchError('Expected features [N, F] and one label per row.')
    n_classes = n_classes or int(labels.max()) + 1
    if features.shape[0] < max(2, n_classes):
        raise DomainTooSmallError(f'{features.shape[0]} samples cannot calibrate a head over {n_classes} classes.')
    if not bool(torch.isfinite(features).all()):
        raise ShapeMismatchError('Anchor features contain NaN or Inf.')

    features = features.detach().float().cpu()
    labels = labels.detach().long().cpu()
    with seeded(config.seed):
        head = SNGPHead(features.shape[1], n_classes, config)
        optimizer = torch.optim.AdamW(
            [p for p in head.parameters() if p.requires_grad], lr=config.lr, weight_decay=config.weight_decay
        )
        head.train()
        last = math.nan
        for _ in range(config.epochs):
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(head(features), labels)
            loss.backward()
            optimizer.step()
            last = float(loss)
        log.debug('SNGP head fitted, final loss %.4f', last)

    head.eval()
    for p in head.parameters():
        p.requires_grad_(False)

    with torch.no_grad():
        phi = head.random_features(features).double()
        probs = torch.softmax(phi @ head.output.weight.double().T, dim=1).max(dim=1).values
        weighted = phi * (probs * (1.0 - probs)).sqrt()[:, None]
        precision = config.prior_scale * torch.eye(phi.shape[1], dtype=torch.float64) + weighted.T @ weighted
        precision = (precision + precision.T) / 2
        head.precision, head.covariance = _invert_precision(precision, config.ridge)
    return head
