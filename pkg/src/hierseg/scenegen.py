"""Seeded synthetic scene generation for hierarchical point-cloud segmentation.

Scenes are sampled as collections of axis-aligned boxes, one to three per
finest-level class, with per-class size and color priors. Colors are built
hierarchically: each coarse class owns a base color and its children add a
stable offset, so coarse classes are easy to tell apart while sibling classes
require finer cues. Class imbalance is controlled at the finest level and
propagates upward through the taxonomy.

Scene files are ``.npz`` archives (keys ``positions``, ``features``,
``labels_0 .. labels_{H-1}``); a dataset is a JSON manifest listing scene
files plus the taxonomy file, all paths relative to the manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .taxonomy import HierarchySpec, all_mappings

SCENE_EXTENT = (10.0, 10.0, 3.0)


@dataclass
class Scene:
    """One labeled point cloud: positions (N, 3), features (N, C), labels per level."""

    positions: np.ndarray
    features: np.ndarray
    labels: list[np.ndarray]

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = [np.asarray(lab, dtype=np.int64) for lab in self.labels]
        n = self.positions.shape[0]
        if n < 1:
            raise ValueError("scene must contain at least one point")
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must have shape (N, 3), got {self.positions.shape}")
        if not np.isfinite(self.positions).all():
            raise ValueError("positions must be finite")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("features must have shape (N, C)")
        for h, lab in enumerate(self.labels):
            if lab.shape != (n,):
                raise ValueError(f"labels at level {h} must have shape ({n},)")

    @property
    def num_points(self) -> int:
        return self.positions.shape[0]

    @property
    def num_levels(self) -> int:
        return len(self.labels)

    def validate_against(self, spec: HierarchySpec) -> None:
        """Check label ranges and parent-child consistency against a taxonomy."""
        if self.num_levels != spec.num_levels:
            raise ValueError(
                f"scene has {self.num_levels} label levels, taxonomy has {spec.num_levels}"
            )
        for h, (lab, k) in enumerate(zip(self.labels, spec.class_counts)):
            if lab.min() < 0 or lab.max() >= k:
                raise ValueError(f"label out of range at level {h}")
        for h in range(1, spec.num_levels):
            lookup = np.asarray(spec.parents[h - 1], dtype=np.int64)
            if not (lookup[self.labels[h]] == self.labels[h - 1]).all():
                raise ValueError(f"labels at level {h} are inconsistent with level {h - 1}")


@dataclass(frozen=True)
class ImbalanceProfile:
    """Target class frequencies at the finest level, plus a seed for stable priors.

    Coarser-level frequencies are induced by summing child mass through the
    taxonomy, so imbalance grows with depth rather than being set per level.
    """

    frequencies: tuple[float, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        freqs = np.asarray(self.frequencies, dtype=np.float64)
        if freqs.ndim != 1 or freqs.size == 0:
            raise ValueError("frequencies must be a non-empty 1-d sequence")
        if abs(freqs.sum() - 1.0) > 1e-9:
            raise ValueError(f"frequencies must sum to 1, got {freqs.sum()!r}")
        if (freqs <= 0).any():
            raise ValueError("every class frequency must be > 0")
        object.__setattr__(self, "frequencies", tuple(float(f) for f in freqs))

    @classmethod
    def uniform(cls, num_classes: int, seed: int = 0) -> "ImbalanceProfile":
        return cls(frequencies=tuple([1.0 / num_classes] * num_classes), seed=seed)

    @classmethod
    def long_tail(cls, num_classes: int, head_mass: float = 0.82, seed: int = 0) -> "ImbalanceProfile":
        """One dominant head class, remaining mass spread evenly over the tail."""
        if not 0 < head_mass < 1:
            raise ValueError("head_mass must be in (0, 1)")
        tail = (1.0 - head_mass) / (num_classes - 1)
        return cls(frequencies=(head_mass,) + (tail,) * (num_classes - 1), seed=seed)

    def induced_frequencies(self, spec: HierarchySpec) -> list[np.ndarray]:
        """Per-level target frequencies (coarse first), induced from the finest level."""
        if len(self.frequencies) != spec.class_counts[-1]:
            raise ValueError(
                f"profile has {len(self.frequencies)} classes, taxonomy finest level "
                f"has {spec.class_counts[-1]}"
            )
        freqs = [np.asarray(self.frequencies, dtype=np.float64)]
        for mapping in reversed(all_mappings(spec)):
            freqs.append(freqs[-1] @ mapping.entries.astype(np.float64))
        return freqs[::-1]


def _hue_to_rgb(hue: float) -> np.ndarray:
    """Fully saturated RGB for a hue in [0, 1)."""
    h = (hue % 1.0) * 6.0
    x = 1.0 - abs(h % 2.0 - 1.0)
    sector = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)]
    return np.asarray(sector[int(h) % 6], dtype=np.float64)


def _spread_direction(index: int, count: int) -> np.ndarray:
    """Point ``index`` of ``count`` evenly spread unit vectors (golden spiral)."""
    if count <= 1:
        return np.zeros(3)
    z = 1.0 - 2.0 * (index + 0.5) / count
    r = np.sqrt(max(0.0, 1.0 - z * z))
    phi = index * np.pi * (3.0 - np.sqrt(5.0))
    return np.array([r * np.cos(phi), r * np.sin(phi), z])


def _sibling_color_offsets(parent_lookup: np.ndarray, scale: float) -> np.ndarray:
    """Per-class color offsets that spread siblings apart deterministically."""
    k = parent_lookup.size
    offsets = np.zeros((k, 3))
    for parent in np.unique(parent_lookup):
        siblings = np.flatnonzero(parent_lookup == parent)
        for j, c in enumerate(siblings):
            offsets[c] = scale * _spread_direction(j, siblings.size)
    return offsets


def generate_scene(
    spec: HierarchySpec,
    profile: ImbalanceProfile,
    n_points: int,
    seed: int,
    feature_noise: float = 0.03,
    color_offset_scale: float = 0.22,
) -> Scene:
    """Sample one hierarchy-consistent scene.

    Every finest-level class receives at least one point; the rest are drawn
    multinomially from the profile, so empirical frequencies track the targets
    within sampling error. Deterministic given (spec, profile, n_points, seed).
    """
    k_fine = spec.class_counts[-1]
    if len(profile.frequencies) != k_fine:
        raise ValueError(
            f"profile has {len(profile.frequencies)} classes, taxonomy finest level has {k_fine}"
        )
    if n_points < k_fine:
        raise ValueError(f"n_points must be >= {k_fine} so every class can appear")

    rng = np.random.default_rng([seed & 0x7FFFFFFF, profile.seed & 0x7FFFFFFF])
    prior_rng = np.random.default_rng([profile.seed & 0x7FFFFFFF, k_fine])

    # Stable per-class priors: box size plus a color offset from the parent
    # base color; siblings get evenly spread offset directions so every fine
    # class is separable by color while coarse classes stay the easy cue.
    sizes = prior_rng.uniform(0.6, 2.2, size=k_fine)
    parent_lookup = (
        np.asarray(spec.parents[-1], dtype=np.int64) if spec.num_levels > 1
        else np.arange(k_fine)
    )
    offsets = _sibling_color_offsets(parent_lookup, color_offset_scale)
    n_coarse = spec.class_counts[0] if spec.num_levels > 1 else k_fine
    base_colors = np.stack([0.25 + 0.5 * _hue_to_rgb(p / n_coarse) for p in range(n_coarse)])

    counts = np.ones(k_fine, dtype=np.int64)
    counts += rng.multinomial(n_points - k_fine, np.asarray(profile.frequencies))

    extent = np.asarray(SCENE_EXTENT)
    positions = np.empty((n_points, 3), dtype=np.float64)
    colors = np.empty((n_points, 3), dtype=np.float64)
    fine_labels = np.empty(n_points, dtype=np.int64)

    cursor = 0
    for c in range(k_fine):
        n_c = int(counts[c])
        n_instances = int(rng.integers(1, 4))
        inst_counts = rng.multinomial(n_c, np.full(n_instances, 1.0 / n_instances))
        for n_inst in inst_counts:
            if n_inst == 0:
                continue
            center = rng.uniform(0.0, 1.0, size=3) * extent
            half = 0.5 * sizes[c] * rng.uniform(0.5, 1.0, size=3)
            pts = center + rng.uniform(-1.0, 1.0, size=(n_inst, 3)) * half
            positions[cursor : cursor + n_inst] = pts
            cursor += n_inst
        colors[cursor - n_c : cursor] = np.clip(
            base_colors[parent_lookup[c]]
            + offsets[c]
            + feature_noise * rng.standard_normal((n_c, 3)),
            0.0,
            1.0,
        )
        fine_labels[cursor - n_c : cursor] = c

    order = rng.permutation(n_points)
    return Scene(
        positions=positions[order],
        features=colors[order],
        labels=spec.ancestor_labels(fine_labels[order]),
    )


def augment(
    scene: Scene,
    seed: int,
    scale_range: tuple[float, float] = (0.9, 1.1),
    jitter_sigma: float = 0.005,
    color_drop_prob: float = 0.2,
) -> Scene:
    """Random global scaling, Gaussian point jitter, and per-scene color dropping.

    Labels are untouched; deterministic given the seed.
    """
    rng = np.random.default_rng(seed & 0x7FFFFFFF)
    scale = rng.uniform(scale_range[0], scale_range[1])
    jitter = rng.normal(0.0, jitter_sigma, size=scene.positions.shape) if jitter_sigma > 0 else 0.0
    drop = rng.random() < color_drop_prob
    features = np.zeros_like(scene.features) if drop else scene.features.copy()
    return Scene(
        positions=scene.positions * scale + jitter,
        features=features,
        labels=[lab.copy() for lab in scene.labels],
    )


def class_frequencies(scene: Scene, level: int, num_classes: int | None = None) -> np.ndarray:
    """Empirical class frequencies at one level; sums to 1."""
    if not 0 <= level < scene.num_levels:
        raise ValueError(f"level must be in [0, {scene.num_levels - 1}], got {level}")
    labels = scene.labels[level]
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    counts = np.bincount(labels, minlength=k)
    return counts / counts.sum()


def dataset_frequencies(scenes: list[Scene], spec: HierarchySpec) -> list[np.ndarray]:
    """Per-level class frequencies pooled over a list of scenes."""
    if not scenes:
        raise ValueError("empty scene list")
    out = []
    for level, k in enumerate(spec.class_counts):
        counts = np.zeros(k, dtype=np.int64)
        for scene in scenes:
            counts += np.bincount(scene.labels[level], minlength=k)
        out.append(counts / counts.sum())
    return out


def save_scene(scene: Scene, path: str | Path) -> None:
    arrays = {"positions": scene.positions, "features": scene.features}
    for h, lab in enumerate(scene.labels):
        arrays[f"labels_{h}"] = lab
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_scene(path: str | Path) -> Scene:
    with np.load(path) as data:
        label_keys = sorted(k for k in data.files if k.startswith("labels_"))
        return Scene(
            positions=data["positions"],
            features=data["features"],
            labels=[data[k] for k in label_keys],
        )


def write_dataset(
    scenes: list[Scene],
    spec: HierarchySpec,
    out_dir: str | Path,
    metadata: dict | None = None,
) -> Path:
    """Write scene files, the taxonomy, and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec.save(out_dir / "taxonomy.json")
    scene_files = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:04d}.npz"
        save_scene(scene, out_dir / name)
        scene_files.append(name)
    manifest = {
        "taxonomy": "taxonomy.json",
        "scenes": scene_files,
        "metadata": metadata or {},
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def load_dataset(manifest_path: str | Path) -> tuple[list[Scene], HierarchySpec, dict]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    root = manifest_path.parent
    spec = HierarchySpec.load(root / manifest["taxonomy"])
    scenes = [load_scene(root / name) for name in manifest["scenes"]]
    for scene in scenes:
        scene.validate_against(spec)
    return scenes, spec, manifest.get("metadata", {})
