import numpy as np
import pytest
import torch

from hierseg.model import ModelConfig
from hierseg.scenegen import ImbalanceProfile, generate_scene
from hierseg.taxonomy import HierarchySpec, load_builtin
from hierseg.trainer import TrainConfig


@pytest.fixture
def toy_spec() -> HierarchySpec:
    """Two levels, 4 coarse / 10 fine classes."""
    return load_builtin("toy_two_level")


@pytest.fixture
def tiny_spec() -> HierarchySpec:
    """Two levels, 2 coarse / 4 fine classes."""
    return HierarchySpec(
        class_names=(("left", "right"), ("l0", "l1", "r0", "r1")),
        parents=((0, 0, 1, 1),),
    )


@pytest.fixture
def small_model_config() -> ModelConfig:
    return ModelConfig(
        encoder_dim=16, encoder_hidden=16, decoder_dims=16, decoder_hidden=16,
        guidance_dim=8, guidance_hidden=8, classifier_hidden=16, aux_dim=8,
        dropout=0.0,
    )


@pytest.fixture
def small_train_config(small_model_config) -> TrainConfig:
    return TrainConfig(seed=0, epochs=2, batch_size=2, model=small_model_config)


@pytest.fixture
def toy_scene(toy_spec):
    profile = ImbalanceProfile.uniform(10, seed=1)
    return generate_scene(toy_spec, profile, 128, seed=3)


def finite_difference_gradient(func, tensor: torch.Tensor, indices, step: float = 1e-4):
    """Central-difference gradient oracle at selected flat indices of a tensor.

    Independent of autograd: evaluates ``func()`` twice per coordinate with
    the tensor perturbed in place.
    """
    flat = tensor.detach().reshape(-1)
    grads = []
    for i in indices:
        orig = float(flat[i])
        h = step * max(1.0, abs(orig))
        with torch.no_grad():
            flat[i] = orig + h
        f_plus = float(func())
        with torch.no_grad():
            flat[i] = orig - h
        f_minus = float(func())
        with torch.no_grad():
            flat[i] = orig
        grads.append((f_plus - f_minus) / (2.0 * h))
    return np.asarray(grads)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum.reduce([np.abs(analytic), np.abs(numeric), np.full_like(numeric, 1e-6)])
    return np.abs(analytic - numeric) / scale
