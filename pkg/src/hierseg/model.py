"""The differentiable model: a shared per-point encoder, per-level decoders
with coarse-to-fine guidance and classifiers, and an auxiliary encoder with
per-level projection heads for discriminative features.

The encoder is a lightweight point network: per-point perceptrons plus a
max-pooled global context vector broadcast back to every point. It is
permutation-equivariant and small enough for gradient checks and CPU
training, while exposing the same surfaces a full point-cloud backbone would.

All parameters are double precision so analytic gradients can be compared
against central finite differences tightly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .scenegen import Scene

DTYPE = torch.float64


@dataclass(frozen=True)
class ModelConfig:
    """Widths, guidance weight, and structural switches for the network.

    ``class_counts`` binds the model to a taxonomy (coarse level first).
    ``decoupled=True`` gives every level its own decoder, fusion, and
    classifier; ``False`` collapses them into one shared stack whose
    classifier emits ``max(class_counts)`` logits, sliced per level.
    """

    class_counts: tuple[int, ...] | None = None
    feature_dim: int = 3
    encoder_dim: int = 64
    encoder_hidden: int = 64
    decoder_dims: tuple[int, ...] | int = 64
    decoder_hidden: int = 64
    guidance_dim: int = 32
    guidance_hidden: int = 32
    classifier_hidden: int = 64
    aux_dim: int = 32
    aux_width_factor: float = 0.5
    guidance_weight: float = 1.0
    dropout: float = 0.5
    detach_guidance: bool = False
    decoupled: bool = True

    def __post_init__(self) -> None:
        dims = [
            self.feature_dim + 3, self.encoder_dim, self.encoder_hidden,
            self.decoder_hidden, self.guidance_dim, self.guidance_hidden,
            self.classifier_hidden, self.aux_dim,
        ]
        if any(d < 1 for d in dims):
            raise ValueError("all widths must be >= 1")
        if not np.isfinite(self.guidance_weight) or self.guidance_weight < 0:
            raise ValueError("guidance_weight must be finite and >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.aux_width_factor <= 0:
            raise ValueError("aux_width_factor must be > 0")

    def bound(self) -> "BoundConfig":
        if self.class_counts is None:
            raise ValueError("class_counts must be set before building a model")
        num_levels = len(self.class_counts)
        if isinstance(self.decoder_dims, int):
            dims = (self.decoder_dims,) * num_levels
        else:
            dims = tuple(self.decoder_dims)
            if len(dims) != num_levels:
                raise ValueError(f"need {num_levels} decoder dims, got {len(dims)}")
        if any(d < 1 for d in dims):
            raise ValueError("decoder dims must be >= 1")
        if not self.decoupled and len(set(dims)) != 1:
            raise ValueError("the shared-decoder variant requires equal decoder dims")
        return BoundConfig(config=self, decoder_dims=dims)


@dataclass(frozen=True)
class BoundConfig:
    config: ModelConfig
    decoder_dims: tuple[int, ...]


@dataclass
class FeatureBundle:
    """Everything one forward pass produces, per level where applicable."""

    shared: Tensor                 # (N, encoder_dim)
    mid: list[Tensor]              # (N, decoder_dim_h)
    fused: list[Tensor]            # (N, decoder_dim_h)
    logits: list[Tensor]           # (N, K_h)
    probs: list[Tensor]            # (N, K_h), rows on the simplex
    aux: list[Tensor]              # (N, aux_dim), unit-norm rows
    mid_projected: list[Tensor]    # (N, aux_dim)


def _mlp(dims: list[int], final_activation: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1], dtype=DTYPE))
        if final_activation or i < len(dims) - 2:
            layers.append(nn.Tanh())
    return nn.Sequential(*layers)


class PointEncoder(nn.Module):
    """Per-point perceptron + max-pooled global context, concatenated and mixed."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.local = _mlp([in_dim, hidden, hidden])
        self.combine = _mlp([2 * hidden, out_dim])

    def forward(self, x: Tensor) -> Tensor:
        local = self.local(x)
        pooled = local.max(dim=0).values
        return self.combine(torch.cat([local, pooled.expand_as(local)], dim=1))


class HierSegNet(nn.Module):
    """Hierarchical segmentation network over single scenes (N points at a time)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        bound = config.bound()
        self.config = config
        self.decoder_dims = bound.decoder_dims
        counts = config.class_counts
        num_levels = len(counts)
        in_dim = 3 + config.feature_dim

        self.encoder = PointEncoder(in_dim, config.encoder_hidden, config.encoder_dim)

        if config.decoupled:
            self.decoders = nn.ModuleList(
                _mlp([config.encoder_dim, config.decoder_hidden, d]) for d in self.decoder_dims
            )
            self.guidance_embeds = nn.ModuleList(
                _mlp([counts[h - 1], config.guidance_hidden, config.guidance_dim])
                for h in range(1, num_levels)
            )
            self.fusions = nn.ModuleList(
                [_mlp([self.decoder_dims[0], self.decoder_dims[0]])]
                + [
                    _mlp([self.decoder_dims[h] + config.guidance_dim, self.decoder_dims[h]])
                    for h in range(1, num_levels)
                ]
            )
            self.classifiers = nn.ModuleList(
                self._make_classifier(self.decoder_dims[h], counts[h]) for h in range(num_levels)
            )
        else:
            width = self.decoder_dims[0]
            max_k = max(counts)
            self.decoders = nn.ModuleList(
                [_mlp([config.encoder_dim, config.decoder_hidden, width])]
            )
            self.guidance_embeds = nn.ModuleList(
                [_mlp([max_k, config.guidance_hidden, config.guidance_dim])]
            )
            self.fusions = nn.ModuleList(
                [_mlp([width + config.guidance_dim, width])]
            )
            self.classifiers = nn.ModuleList([self._make_classifier(width, max_k)])

        aux_hidden = max(1, round(config.encoder_hidden * config.aux_width_factor))
        aux_trunk = max(1, round(config.encoder_dim * config.aux_width_factor))
        self.aux_encoder = PointEncoder(in_dim, aux_hidden, aux_trunk)
        self.aux_heads = nn.ModuleList(
            _mlp([aux_trunk, aux_hidden, config.aux_dim], final_activation=False)
            for _ in range(num_levels)
        )
        self.mid_projections = nn.ModuleList(
            self._make_mid_projection(self.decoder_dims[h], config.aux_dim)
            for h in range(num_levels)
        )

    def _make_classifier(self, in_dim: int, num_classes: int) -> nn.Sequential:
        return nn.Sequential(
            nn.Linear(in_dim, self.config.classifier_hidden, dtype=DTYPE),
            nn.Tanh(),
            nn.Dropout(self.config.dropout),
            nn.Linear(self.config.classifier_hidden, num_classes, dtype=DTYPE),
        )

    @staticmethod
    def _make_mid_projection(in_dim: int, out_dim: int) -> nn.Linear:
        proj = nn.Linear(in_dim, out_dim, bias=False, dtype=DTYPE)
        with torch.no_grad():
            proj.weight.zero_()
            for i in range(min(in_dim, out_dim)):
                proj.weight[i, i] = 1.0
        return proj

    @property
    def num_levels(self) -> int:
        return len(self.config.class_counts)

    def scene_inputs(self, scene: Scene) -> Tensor:
        if scene.features.shape[1] != self.config.feature_dim:
            raise ValueError(
                f"scene has {scene.features.shape[1]} feature channels, "
                f"model expects {self.config.feature_dim}"
            )
        return torch.cat(
            [
                torch.from_numpy(scene.positions).to(DTYPE),
                torch.from_numpy(scene.features).to(DTYPE),
            ],
            dim=1,
        )

    def encode(self, inputs: Tensor) -> Tensor:
        """Shared per-point features, shape (N, encoder_dim)."""
        if not torch.isfinite(inputs).all():
            raise ValueError("encoder input must be finite")
        return self.encoder(inputs)

    def decode_hierarchy(self, shared: Tensor, level: int) -> Tensor:
        """Level-specific middle features from the shared representation."""
        if not 0 <= level < self.num_levels:
            raise ValueError(f"level must be in [0, {self.num_levels - 1}], got {level}")
        decoder = self.decoders[level] if self.config.decoupled else self.decoders[0]
        return decoder(shared)

    def guide_and_classify(
        self, mid: Tensor, prev_probs: Tensor | None, level: int
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Fuse middle features with embedded coarser-level probabilities, classify.

        At the coarsest level there is no guidance and the fusion transforms
        the middle features alone. The guidance contribution is scaled by the
        configured weight before concatenation; with ``detach_guidance`` the
        coarser probabilities enter as constants.
        """
        counts = self.config.class_counts
        if level == 0:
            if prev_probs is not None:
                raise ValueError("the coarsest level takes no guidance input")
        else:
            if prev_probs is None:
                raise ValueError(f"level {level} requires guidance probabilities")
            if prev_probs.shape[1] != counts[level - 1]:
                raise ValueError(
                    f"guidance width {prev_probs.shape[1]} does not match "
                    f"{counts[level - 1]} classes at level {level - 1}"
                )
            if self.config.detach_guidance:
                prev_probs = prev_probs.detach()

        alpha = self.config.guidance_weight
        if self.config.decoupled:
            if level == 0:
                fused = self.fusions[0](mid)
            else:
                guidance = alpha * self.guidance_embeds[level - 1](prev_probs)
                fused = self.fusions[level](torch.cat([mid, guidance], dim=1))
            logits = self.classifiers[level](fused)
        else:
            max_k = max(counts)
            if level == 0:
                padded = mid.new_zeros((mid.shape[0], max_k))
            else:
                padded = F.pad(prev_probs, (0, max_k - prev_probs.shape[1]))
            guidance = alpha * self.guidance_embeds[0](padded)
            fused = self.fusions[0](torch.cat([mid, guidance], dim=1))
            logits = self.classifiers[0](fused)[:, : counts[level]]

        return fused, logits, torch.softmax(logits, dim=1)

    def encode_aux(self, inputs: Tensor) -> list[Tensor]:
        """Per-level unit-norm discriminative features from the auxiliary branch."""
        if not torch.isfinite(inputs).all():
            raise ValueError("encoder input must be finite")
        trunk = self.aux_encoder(inputs)
        return [F.normalize(head(trunk), dim=1, eps=1e-12) for head in self.aux_heads]

    def project_mid_for_bis(self, mid: Tensor, level: int) -> Tensor:
        """Linear map of middle features into the auxiliary feature space."""
        if not 0 <= level < self.num_levels:
            raise ValueError(f"level must be in [0, {self.num_levels - 1}], got {level}")
        return self.mid_projections[level](mid)

    def forward(self, inputs: Tensor) -> FeatureBundle:
        shared = self.encode(inputs)
        mid, fused, logits, probs = [], [], [], []
        prev = None
        for level in range(self.num_levels):
            m = self.decode_hierarchy(shared, level)
            f, lg, p = self.guide_and_classify(m, prev, level)
            mid.append(m)
            fused.append(f)
            logits.append(lg)
            probs.append(p)
            prev = p
        aux = self.encode_aux(inputs)
        projected = [self.project_mid_for_bis(mid[h], h) for h in range(self.num_levels)]
        return FeatureBundle(
            shared=shared, mid=mid, fused=fused, logits=logits, probs=probs,
            aux=aux, mid_projected=projected,
        )

    def forward_scene(self, scene: Scene) -> FeatureBundle:
        return self.forward(self.scene_inputs(scene))

    @torch.no_grad()
    def predict_probs(self, scene: Scene) -> list[np.ndarray]:
        """Per-level probability matrices for one scene (inference mode)."""
        was_training = self.training
        self.eval()
        try:
            bundle = self.forward_scene(scene)
            return [p.numpy().copy() for p in bundle.probs]
        finally:
            self.train(was_training)

    def parameter_names(self, prefix: str) -> set[str]:
        """Names of all parameters whose qualified name starts with a prefix."""
        return {name for name, _ in self.named_parameters() if name.startswith(prefix)}
