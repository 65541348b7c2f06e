"""Training objectives: per-level cross-entropy, cross-level consistency,
supervised contrastive discrimination, and cross-branch prototype alignment.

All losses take probability or feature tensors and return scalars connected
to the autograd graph. `loss_total` assembles the weighted sum and a plain
float report suitable for line-delimited logging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor

from .protobank import PrototypeBank
from .taxonomy import MappingMatrix

LOG_FLOOR = 1e-12

CHC_VARIANTS = ("literal", "aggregate")
CONTRASTIVE_FORMS = ("infonce", "paper_literal")


def loss_ces(
    probs: list[Tensor], labels: list[Tensor], smoothing: float = 0.2
) -> tuple[Tensor, list[Tensor]]:
    """Label-smoothed cross-entropy summed over levels, averaged over points.

    Targets are ``(1 - smoothing) * onehot + smoothing / K``; probabilities are
    clamped at 1e-12 before the log.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    if len(probs) != len(labels):
        raise ValueError("need one label array per probability matrix")
    per_level = []
    for p, lab in zip(probs, labels):
        k = p.shape[1]
        if lab.min() < 0 or lab.max() >= k:
            raise ValueError(f"label out of range for {k} classes")
        onehot = F.one_hot(lab, k).to(p.dtype)
        targets = (1.0 - smoothing) * onehot + smoothing / k
        per_level.append(-(targets * p.clamp_min(LOG_FLOOR).log()).sum(dim=1).mean())
    total = torch.stack(per_level).sum()
    return total, per_level


def loss_chc(
    probs: list[Tensor], mappings: list[MappingMatrix], variant: str = "literal"
) -> Tensor:
    """Squared disagreement between adjacent levels' probability vectors.

    ``literal`` compares each fine distribution against the coarse one expanded
    to child space (so even a perfectly consistent one-hot pair scores
    ``children - 1`` per point when a parent has several children).
    ``aggregate`` sums child mass up to parent space first and is zero exactly
    when the coarse distribution equals the aggregated fine one.
    """
    if variant not in CHC_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {CHC_VARIANTS}")
    if len(mappings) != len(probs) - 1:
        raise ValueError(f"need {len(probs) - 1} mappings for {len(probs)} levels")
    total = torch.zeros((), dtype=probs[0].dtype)
    for level in range(1, len(probs)):
        matrix = torch.as_tensor(mappings[level - 1].entries, dtype=probs[level].dtype)
        if probs[level].shape[1] != matrix.shape[0] or probs[level - 1].shape[1] != matrix.shape[1]:
            raise ValueError(f"mapping shape {tuple(matrix.shape)} does not fit levels {level - 1}, {level}")
        if variant == "literal":
            diff = probs[level] - probs[level - 1] @ matrix.T
        else:
            diff = probs[level] @ matrix - probs[level - 1]
        total = total + diff.pow(2).sum(dim=1).mean()
    return total


def _subsample_per_class(
    labels: Tensor, max_per_class: int, generator: torch.Generator | None
) -> Tensor:
    keep = []
    for c in labels.unique(sorted=True):
        idx = (labels == c).nonzero(as_tuple=True)[0]
        if idx.numel() > max_per_class:
            perm = torch.randperm(idx.numel(), generator=generator)[:max_per_class]
            idx = idx[perm.sort().values]
        keep.append(idx)
    return torch.cat(keep)


def loss_con(
    features: Tensor,
    labels: Tensor,
    temperature: float = 0.07,
    max_per_class: int = 64,
    form: str = "infonce",
    generator: torch.Generator | None = None,
) -> tuple[Tensor, bool]:
    """Supervised contrastive loss over unit-norm features.

    Pairs sharing a label are positives; negatives are, per anchor, all
    features of other classes. ``infonce`` keeps the positive in the
    denominator and is nonnegative; ``paper_literal`` subtracts the raw
    log-sum of negative similarities and is unbounded below. Returns the
    loss and a flag marking batches that were skipped for lack of a
    positive/negative split (fewer than two classes, or no repeated class).
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if max_per_class < 2:
        raise ValueError("max_per_class must be >= 2")
    if form not in CONTRASTIVE_FORMS:
        raise ValueError(f"unknown form {form!r}; expected one of {CONTRASTIVE_FORMS}")
    zero = torch.zeros((), dtype=features.dtype)
    if labels.unique().numel() < 2:
        return zero, True

    idx = _subsample_per_class(labels, max_per_class, generator)
    feats = features[idx]
    labs = labels[idx]

    sims = feats @ feats.T / temperature
    same = labs.unsqueeze(0) == labs.unsqueeze(1)
    eye = torch.eye(len(labs), dtype=torch.bool)
    pos_mask = same & ~eye
    if not pos_mask.any():
        return zero, True

    neg_lse = torch.logsumexp(sims.masked_fill(same, -math.inf), dim=1)
    anchor_idx, pos_idx = pos_mask.nonzero(as_tuple=True)
    pos_sims = sims[anchor_idx, pos_idx]
    if form == "infonce":
        terms = F.softplus(neg_lse[anchor_idx] - pos_sims)
    else:
        terms = neg_lse[anchor_idx] - pos_sims
    return terms.mean(), False


def loss_bis(
    main_projected: Tensor,
    aux_features: Tensor,
    labels: Tensor,
    bank: PrototypeBank,
    level: int,
) -> Tensor:
    """Cross-branch prototype alignment: each branch's features are pulled
    toward the other branch's class prototype under a smooth-L1 penalty.

    Prototypes come from the bank and carry no gradient; the smooth-L1 of a
    vector is the mean over dimensions. Classes absent from the batch
    contribute nothing; classes present but missing from the bank are an error.
    """
    if main_projected.shape != aux_features.shape:
        raise ValueError("both branches must provide features of equal shape")
    main_protos = bank.prototypes(level, "main").to(main_projected.dtype)
    aux_protos = bank.prototypes(level, "aux").to(main_projected.dtype)
    init_main = bank.initialized(level, "main")
    init_aux = bank.initialized(level, "aux")

    total = torch.zeros((), dtype=main_projected.dtype)
    for c in labels.unique(sorted=True):
        if not (init_main[c] and init_aux[c]):
            raise ValueError(f"bank has no prototype for class {int(c)} at level {level}")
        members = labels == c
        f = aux_features[members]
        h = main_projected[members]
        pull_aux = F.smooth_l1_loss(f, main_protos[c].expand_as(f), reduction="none").mean(dim=1)
        pull_main = F.smooth_l1_loss(h, aux_protos[c].expand_as(h), reduction="none").mean(dim=1)
        total = total + (pull_aux + pull_main).mean()
    return total


@dataclass
class LossReport:
    """Per-step loss breakdown; serializes to one line-delimited JSON record.

    Record field order: epoch, step, lr, ces_per_h, chc, con_per_h, bis_per_h,
    aux_per_h, gates, con_skipped_per_h, total.
    """

    ces_per_h: list[float]
    chc: float
    con_per_h: list[float]
    bis_per_h: list[float]
    gates: list[bool]
    total: float
    con_skipped_per_h: list[bool] = field(default_factory=list)
    epoch: int = 0
    step: int = 0
    lr: float = 0.0

    @property
    def aux_per_h(self) -> list[float]:
        return [c + b for c, b in zip(self.con_per_h, self.bis_per_h)]

    def to_record(self) -> dict:
        return {
            "kind": "step",
            "epoch": self.epoch,
            "step": self.step,
            "lr": self.lr,
            "ces_per_h": self.ces_per_h,
            "chc": self.chc,
            "con_per_h": self.con_per_h,
            "bis_per_h": self.bis_per_h,
            "aux_per_h": self.aux_per_h,
            "gates": self.gates,
            "con_skipped_per_h": self.con_skipped_per_h,
            "total": self.total,
        }


def loss_total(
    ces_per_h: list[Tensor],
    chc: Tensor,
    con_per_h: list[Tensor],
    bis_per_h: list[Tensor],
    aux_weight: float,
    gates: list[bool],
    include_chc: bool = True,
    include_con: bool = True,
    include_bis: bool = True,
) -> tuple[Tensor, LossReport]:
    """Weighted combination of all objectives.

    total = sum_h ces_h + chc + aux_weight * sum_h gate_h * (con_h + bis_h).
    The include flags drop a component from the total (for ablations) while
    its value is still recorded. Non-finite components raise, naming the
    offender.
    """
    if aux_weight < 0:
        raise ValueError("aux_weight must be >= 0")
    if not (len(ces_per_h) == len(con_per_h) == len(bis_per_h) == len(gates)):
        raise ValueError("per-level component lists must have equal length")
    named = (
        [(f"ces[{h}]", t) for h, t in enumerate(ces_per_h)]
        + [("chc", chc)]
        + [(f"con[{h}]", t) for h, t in enumerate(con_per_h)]
        + [(f"bis[{h}]", t) for h, t in enumerate(bis_per_h)]
    )
    for name, tensor in named:
        if not torch.isfinite(tensor):
            raise FloatingPointError(f"non-finite loss component: {name} = {tensor.item()!r}")

    total = torch.stack(list(ces_per_h)).sum()
    if include_chc:
        total = total + chc
    for gate, con, bis in zip(gates, con_per_h, bis_per_h):
        if not gate:
            continue
        aux = torch.zeros((), dtype=total.dtype)
        if include_con:
            aux = aux + con
        if include_bis:
            aux = aux + bis
        total = total + aux_weight * aux

    report = LossReport(
        ces_per_h=[t.detach().item() for t in ces_per_h],
        chc=chc.detach().item(),
        con_per_h=[t.detach().item() for t in con_per_h],
        bis_per_h=[t.detach().item() for t in bis_per_h],
        gates=list(gates),
        total=total.detach().item(),
    )
    return total, report
