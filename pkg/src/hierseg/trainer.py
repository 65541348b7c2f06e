"""Training loop: batching, forward passes, prototype updates, loss assembly,
optimization, cosine learning-rate schedule, checkpointing, and ablations.

Each step runs in a fixed order: shared encoding, per-level decoding with
coarse-to-fine guidance, main-branch losses, auxiliary encoding, prototype
updates under no-grad, gated auxiliary losses, then one optimizer step on the
combined total. Runs are reproducible: (seed, config, dataset) fully
determine the training log on a fixed platform.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import LossReport, loss_bis, loss_ces, loss_chc, loss_con, loss_total
from .metrics import MetricsReport, evaluate
from .model import DTYPE, HierSegNet, ModelConfig
from .protobank import PrototypeBank, batch_prototypes, imbalance_gate
from .scenegen import Scene, augment, dataset_frequencies
from .taxonomy import HierarchySpec, all_mappings


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


class NonFiniteLossError(FloatingPointError):
    """A loss component became non-finite; carries the diagnostic report."""

    def __init__(self, message: str, report: LossReport | None = None):
        super().__init__(message)
        self.report = report


ABLATION_SWITCHES = ("LDF", "CFG", "ADB", "L_con", "L_chc", "L_bis")

# Short names accepted in config files and --override flags.
_CONFIG_ALIASES = {
    "lambda": "aux_weight",
    "alpha": "guidance_weight",
    "beta": "ema_momentum",
    "tau": "temperature",
    "tau_g": "gate_threshold",
    "epsilon": "label_smoothing",
    "smoothing": "label_smoothing",
}


@dataclass(frozen=True)
class TrainConfig:
    """All knobs of one training run. Defaults follow the reference recipe:
    cosine learning rate 0.01 -> 1e-5 over 100 epochs, decoupled-weight-decay
    adaptive optimizer with moments (0.9, 0.999) and decay 1e-4, label
    smoothing 0.2, contrastive temperature 0.07, prototype momentum 0.999,
    and unit weights for guidance and the auxiliary objectives.
    """

    seed: int = 0
    epochs: int = 100
    batch_size: int = 4
    lr_initial: float = 0.01
    lr_final: float = 1.0e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 1.0e-4
    aux_weight: float = 1.0
    guidance_weight: float = 1.0
    ema_momentum: float = 0.999
    temperature: float = 0.07
    label_smoothing: float = 0.2
    gate_threshold: float = 0.6
    chc_variant: str = "literal"
    contrastive_form: str = "infonce"
    per_class_cap: int = 64
    use_consistency: bool = True
    use_contrastive: bool = True
    use_cross_branch: bool = True
    decoupled: bool = True
    guidance_on: bool = True
    aux_branch_on: bool = True
    augment_train: bool = True
    val_hash_modulus: int = 10
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_initial <= 0 or self.lr_final <= 0:
            raise ConfigError("learning-rate schedule endpoints must be positive")
        if self.aux_weight < 0:
            raise ConfigError("aux_weight must be >= 0")
        if not 0 < self.ema_momentum < 1:
            raise ConfigError("ema_momentum must be in (0, 1)")
        if self.val_hash_modulus < 2:
            raise ConfigError("val_hash_modulus must be >= 2")

    @property
    def effective_aux_weight(self) -> float:
        return self.aux_weight if self.aux_branch_on else 0.0

    @property
    def effective_guidance_weight(self) -> float:
        return self.guidance_weight if self.guidance_on else 0.0

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["model"] = {k: v for k, v in data["model"].items() if k != "class_counts"}
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = dict(data)
        for alias, target in _CONFIG_ALIASES.items():
            if alias in data:
                if target in data:
                    raise ConfigError(f"config sets both '{alias}' and '{target}'")
                data[target] = data.pop(alias)
        if "seed" not in data:
            raise ConfigError("missing required config key: seed")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = [k for k in data if k not in fields]
        if unknown:
            raise ConfigError(f"unknown config key: {unknown[0]}")
        model_data = data.pop("model", {})
        if not isinstance(model_data, dict):
            raise ConfigError("config key 'model' must be an object")
        model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
        for key in model_data:
            if key not in model_fields or key == "class_counts":
                raise ConfigError(f"unknown config key: model.{key}")
        if "decoder_dims" in model_data and isinstance(model_data["decoder_dims"], list):
            model_data["decoder_dims"] = tuple(model_data["decoder_dims"])
        try:
            model = ModelConfig(**model_data)
            return cls(model=model, **data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] | None = None) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        for item in overrides or []:
            data = apply_override(data, item)
        return cls.from_dict(data)


def apply_override(data: dict, item: str) -> dict:
    """Apply one ``dotted.path=value`` override; values parse as JSON literals."""
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    path, raw = item.split("=", 1)
    keys = path.strip().split(".")
    if not all(keys):
        raise ConfigError(f"bad override path: {path!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    data = copy.deepcopy(data)
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {path!r} crosses a non-object value")
    node[keys[-1]] = value
    return data


def disable_switch(config: TrainConfig, switch: str) -> TrainConfig:
    """Return a config with one structural or loss component turned off."""
    if switch == "LDF":
        return dataclasses.replace(config, decoupled=False)
    if switch == "CFG":
        return dataclasses.replace(config, guidance_on=False)
    if switch == "ADB":
        return dataclasses.replace(config, aux_branch_on=False)
    if switch == "L_con":
        return dataclasses.replace(config, use_contrastive=False)
    if switch == "L_chc":
        return dataclasses.replace(config, use_consistency=False)
    if switch == "L_bis":
        return dataclasses.replace(config, use_cross_branch=False)
    raise ConfigError(f"unknown ablation switch {switch!r}; expected one of {ABLATION_SWITCHES}")


def cosine_lr(config: TrainConfig, epoch: int) -> float:
    """Cosine schedule from lr_initial (epoch 0) to lr_final (last epoch)."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch must be in [0, {config.epochs - 1}], got {epoch}")
    if config.epochs == 1:
        return config.lr_initial
    span = config.lr_initial - config.lr_final
    return config.lr_final + 0.5 * span * (1.0 + math.cos(math.pi * epoch / (config.epochs - 1)))


def _mix_seed(*parts: int) -> int:
    h = 0x345678
    for p in parts:
        h = (h * 1000003 + int(p) + 0x9E3779B9) % (2**63)
    return h


def make_model(config: TrainConfig, spec: HierarchySpec) -> HierSegNet:
    """Build the network for a taxonomy, applying the structural switches."""
    model_config = dataclasses.replace(
        config.model,
        class_counts=spec.class_counts,
        guidance_weight=config.effective_guidance_weight,
        decoupled=config.decoupled,
    )
    return HierSegNet(model_config)


def make_bank(config: TrainConfig, spec: HierarchySpec) -> PrototypeBank:
    return PrototypeBank(spec.class_counts, config.model.aux_dim, config.ema_momentum)


def make_optimizer(model: HierSegNet, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.lr_initial,
        betas=(config.adam_beta1, config.adam_beta2),
        weight_decay=config.weight_decay,
    )


def train_step(
    model: HierSegNet,
    bank: PrototypeBank,
    batch: list[Scene],
    config: TrainConfig,
    optimizer: torch.optim.Optimizer,
    gates: list[bool],
    mappings,
    generator: torch.Generator | None = None,
) -> LossReport:
    """One optimization step over a batch of scenes.

    Order: forward both branches, main losses, no-grad prototype updates,
    gated auxiliary losses, combined total, one optimizer step. Raises
    ``NonFiniteLossError`` (with a diagnostic report) instead of stepping on
    a non-finite total.
    """
    if not batch:
        raise ValueError("empty batch")
    model.train()
    num_levels = model.num_levels

    bundles = [model.forward_scene(scene) for scene in batch]
    labels = [
        torch.cat([torch.from_numpy(scene.labels[h]) for scene in batch])
        for h in range(num_levels)
    ]
    probs = [torch.cat([b.probs[h] for b in bundles]) for h in range(num_levels)]
    aux = [torch.cat([b.aux[h] for b in bundles]) for h in range(num_levels)]
    projected = [torch.cat([b.mid_projected[h] for b in bundles]) for h in range(num_levels)]

    _, ces_per_h = loss_ces(probs, labels, config.label_smoothing)
    chc = loss_chc(probs, mappings, config.chc_variant)

    con_per_h, bis_per_h, skipped_per_h = [], [], []
    for h in range(num_levels):
        k = model.config.class_counts[h]
        with torch.no_grad():
            aux_protos, aux_mask = batch_prototypes(aux[h].detach(), labels[h], k)
            main_protos, main_mask = batch_prototypes(projected[h].detach(), labels[h], k)
            bank.ema_update(h, "aux", aux_protos, aux_mask)
            bank.ema_update(h, "main", main_protos, main_mask)
        con, skipped = loss_con(
            aux[h], labels[h], config.temperature, config.per_class_cap,
            config.contrastive_form, generator,
        )
        bis = loss_bis(projected[h], aux[h], labels[h], bank, h)
        con_per_h.append(con)
        bis_per_h.append(bis)
        skipped_per_h.append(skipped)

    try:
        total, report = loss_total(
            ces_per_h, chc, con_per_h, bis_per_h,
            config.effective_aux_weight, gates,
            include_chc=config.use_consistency,
            include_con=config.use_contrastive,
            include_bis=config.use_cross_branch,
        )
    except FloatingPointError as exc:
        diagnostic = LossReport(
            ces_per_h=[t.detach().item() for t in ces_per_h],
            chc=chc.detach().item(),
            con_per_h=[t.detach().item() for t in con_per_h],
            bis_per_h=[t.detach().item() for t in bis_per_h],
            gates=list(gates),
            total=float("nan"),
            con_skipped_per_h=skipped_per_h,
        )
        raise NonFiniteLossError(str(exc), diagnostic) from exc

    report.con_skipped_per_h = skipped_per_h
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return report


def split_train_val(scenes: list[Scene], modulus: int) -> tuple[list[Scene], list[Scene]]:
    """Deterministic index-hash split; scenes whose hash hits 0 become validation."""
    train, val = [], []
    for i, scene in enumerate(scenes):
        digest = hashlib.sha256(f"scene:{i}".encode()).digest()
        bucket = int.from_bytes(digest[:8], "big") % modulus
        (val if bucket == 0 else train).append(scene)
    if not train:
        train, val = val, []
    return train, val


@dataclass
class FitResult:
    model: HierSegNet
    bank: PrototypeBank
    records: list[dict]
    best_avg_miou: float
    best_epoch: int
    gates: list[bool]
    checkpoint_path: Path | None = None
    best_checkpoint_path: Path | None = None
    log_path: Path | None = None


def save_checkpoint(
    path: str | Path,
    model: HierSegNet,
    bank: PrototypeBank,
    config: TrainConfig,
    spec: HierarchySpec,
    epoch: int,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> None:
    """Container with parameter tensors, bank state, configs, and the taxonomy.

    Contents are plain dicts/tensors, so round-trips are bit-exact and loading
    never unpickles arbitrary objects.
    """
    payload = {
        "format": "hierseg-checkpoint-v1",
        "epoch": epoch,
        "train_config": config.to_dict(),
        "taxonomy": spec.to_dict(),
        "model_state": model.state_dict(),
        "bank_state": bank.state_dict(),
    }
    if optimizer is not None:
        payload["optimizer_state"] = optimizer.state_dict()
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, weights_only=True)
    if payload.get("format") != "hierseg-checkpoint-v1":
        raise ValueError(f"{path} is not a recognized checkpoint file")
    return payload


def restore_model(payload: dict) -> tuple[HierSegNet, PrototypeBank, TrainConfig, HierarchySpec]:
    """Rebuild model, bank, config, and taxonomy from a checkpoint payload."""
    config = TrainConfig.from_dict(payload["train_config"])
    spec = HierarchySpec.from_dict(payload["taxonomy"])
    model = make_model(config, spec)
    model.load_state_dict(payload["model_state"])
    bank = PrototypeBank.from_state_dict(payload["bank_state"])
    return model, bank, config, spec


def fit(
    scenes: list[Scene],
    spec: HierarchySpec,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> FitResult:
    """Full training run over a scene dataset.

    Scenes are split train/validation by a stable index hash; per-epoch
    augmentation applies to training scenes only. The epoch whose validation
    average mIoU is best is retained as the best checkpoint. When ``out_dir``
    is given, writes ``train_log.jsonl``, ``checkpoint.pt`` (final, resumable)
    and ``checkpoint_best.pt``.
    """
    if not scenes:
        raise ValueError("dataset is empty")
    for scene in scenes:
        scene.validate_against(spec)

    train_scenes, val_scenes = split_train_val(scenes, config.val_hash_modulus)
    eval_scenes = val_scenes if val_scenes else train_scenes
    gates = imbalance_gate(dataset_frequencies(train_scenes, spec), config.gate_threshold)
    mappings = all_mappings(spec)

    torch.manual_seed(_mix_seed(config.seed, 0xA11CE))
    model = make_model(config, spec)
    bank = make_bank(config, spec)
    optimizer = make_optimizer(model, config)
    start_epoch = 0
    best_payload: dict | None = None
    best_avg_miou = -math.inf
    best_epoch = -1

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        if TrainConfig.from_dict(payload["train_config"]) != config:
            raise ConfigError("resume checkpoint was trained with a different config")
        model.load_state_dict(payload["model_state"])
        bank.load_state_dict(payload["bank_state"])
        if "optimizer_state" in payload:
            optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = int(payload["epoch"])
        best_avg_miou = float(payload.get("best_avg_miou", -math.inf))
        best_epoch = int(payload.get("best_epoch", -1))
        if "best_model_state" in payload:
            best_payload = {
                "model_state": payload["best_model_state"],
                "bank_state": payload["best_bank_state"],
            }

    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    log_handle = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_handle = open(log_path, "a" if resume_from else "w", encoding="utf-8")

    records: list[dict] = []

    def emit(record: dict) -> None:
        records.append(record)
        if log_handle is not None:
            log_handle.write(json.dumps(record, sort_keys=True) + "\n")
            log_handle.flush()

    try:
        for epoch in range(start_epoch, config.epochs):
            lr = cosine_lr(config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            torch.manual_seed(_mix_seed(config.seed, epoch, 0xD0))
            con_generator = torch.Generator()
            con_generator.manual_seed(_mix_seed(config.seed, epoch, 0xC0))
            order = np.random.default_rng([config.seed & 0x7FFFFFFF, epoch]).permutation(
                len(train_scenes)
            )
            if config.augment_train:
                epoch_scenes = [
                    augment(train_scenes[i], _mix_seed(config.seed, epoch, i) & 0x7FFFFFFF)
                    for i in order
                ]
            else:
                epoch_scenes = [train_scenes[i] for i in order]

            for step, lo in enumerate(range(0, len(epoch_scenes), config.batch_size)):
                batch = epoch_scenes[lo : lo + config.batch_size]
                report = train_step(
                    model, bank, batch, config, optimizer, gates, mappings, con_generator
                )
                report.epoch = epoch
                report.step = step
                report.lr = lr
                emit(report.to_record())

            metrics = evaluate(model, eval_scenes, spec)
            emit(
                {
                    "kind": "epoch",
                    "epoch": epoch,
                    "lr": lr,
                    "val_miou_per_level": metrics.miou_per_level,
                    "val_avg_miou": metrics.avg_miou,
                    "val_consistency_per_level": metrics.consistency_per_level,
                }
            )
            if metrics.avg_miou > best_avg_miou:
                best_avg_miou = metrics.avg_miou
                best_epoch = epoch
                best_payload = {
                    "model_state": copy.deepcopy(model.state_dict()),
                    "bank_state": bank.state_dict(),
                }
    finally:
        if log_handle is not None:
            log_handle.close()

    result = FitResult(
        model=model,
        bank=bank,
        records=records,
        best_avg_miou=best_avg_miou,
        best_epoch=best_epoch,
        gates=gates,
        log_path=log_path,
    )

    if out_dir is not None:
        final_path = out_dir / "checkpoint.pt"
        extra = {"best_avg_miou": best_avg_miou, "best_epoch": best_epoch}
        if best_payload is not None:
            extra["best_model_state"] = best_payload["model_state"]
            extra["best_bank_state"] = best_payload["bank_state"]
        save_checkpoint(
            final_path, model, bank, config, spec, config.epochs, optimizer, extra
        )
        result.checkpoint_path = final_path

        if best_payload is not None:
            best_model = make_model(config, spec)
            best_model.load_state_dict(best_payload["model_state"])
            best_bank = PrototypeBank.from_state_dict(best_payload["bank_state"])
            best_path = out_dir / "checkpoint_best.pt"
            save_checkpoint(
                best_path, best_model, best_bank, config, spec, best_epoch + 1,
                extra={"best_avg_miou": best_avg_miou, "best_epoch": best_epoch},
            )
            result.best_checkpoint_path = best_path

    return result


def minority_classes(frequencies: np.ndarray) -> np.ndarray:
    """Indices of the bottom-third-frequency classes (at least one)."""
    order = np.argsort(frequencies, kind="stable")
    take = max(1, len(frequencies) // 3)
    return np.sort(order[:take])


def _minority_mean_iou(report: MetricsReport, level: int, classes: np.ndarray) -> float:
    values = [report.iou_per_class[level][c] for c in classes]
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else float("nan")


def ablate(
    scenes: list[Scene],
    spec: HierarchySpec,
    config: TrainConfig,
    switches: list[str],
    eval_scenes: list[Scene] | None = None,
) -> dict:
    """Train the full model and matched-seed variants with one switch off each.

    Returns a comparison structure with per-variant average mIoU, deltas
    against the full model, and minority-class mean IoU at the finest level.
    """
    for switch in switches:
        if switch not in ABLATION_SWITCHES:
            raise ConfigError(
                f"unknown ablation switch {switch!r}; expected one of {ABLATION_SWITCHES}"
            )

    frequencies = dataset_frequencies(scenes, spec)[-1]
    minority = minority_classes(frequencies)

    def run(run_config: TrainConfig) -> dict:
        result = fit(scenes, spec, run_config)
        target = eval_scenes if eval_scenes is not None else scenes
        metrics = evaluate(result.model, target, spec)
        return {
            "avg_miou": metrics.avg_miou,
            "miou_per_level": metrics.miou_per_level,
            "minority_mean_iou_finest": _minority_mean_iou(
                metrics, spec.num_levels - 1, minority
            ),
            "iou_per_class": metrics.iou_per_class,
        }

    full = run(config)
    variants = {}
    for switch in switches:
        variants[f"off_{switch}"] = run(disable_switch(config, switch))

    deltas = {
        name: {
            "avg_miou": full["avg_miou"] - data["avg_miou"],
            "minority_mean_iou_finest": (
                full["minority_mean_iou_finest"] - data["minority_mean_iou_finest"]
            ),
        }
        for name, data in variants.items()
    }
    return {
        "seed": config.seed,
        "minority_classes_finest": minority.tolist(),
        "full": full,
        "variants": variants,
        "deltas_full_minus_variant": deltas,
    }
