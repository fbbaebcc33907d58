"""Shared fixtures and finite-difference helpers."""

import numpy as np
import pytest
import torch


def central_difference_grads(loss_fn, tensor: torch.Tensor, indices, step: float = 1e-4):
    """Central-difference gradient of ``loss_fn()`` w.r.t. selected entries
    of ``tensor`` (modified in place under no_grad, then restored)."""
    grads = []
    flat = tensor.detach().reshape(-1)
    for idx in indices:
        with torch.no_grad():
            original = flat[idx].item()
            flat[idx] = original + step
            up = float(loss_fn())
            flat[idx] = original - step
            down = float(loss_fn())
            flat[idx] = original
        grads.append((up - down) / (2 * step))
    return np.asarray(grads)


def autodiff_grads(loss_fn, tensor: torch.Tensor, indices):
    if tensor.grad is not None:
        tensor.grad = None
    loss = loss_fn()
    loss.backward()
    flat = tensor.grad.reshape(-1)
    return np.asarray([float(flat[i]) for i in indices])


def relative_gradient_error(loss_fn, tensor, indices, step=1e-4):
    """Max relative deviation between autodiff and central differences."""
    num = central_difference_grads(loss_fn, tensor, indices, step)
    ana = autodiff_grads(loss_fn, tensor, indices)
    scale = np.maximum(np.abs(num), np.abs(ana))
    scale = np.where(scale < 1e-8, 1.0, scale)
    return float((np.abs(num - ana) / scale).max())


@pytest.fixture(scope="session")
def tiny_scene():
    from topicmatch.synth import SceneParams, generate_scene_pair

    params = SceneParams(dims=(64, 64), max_rotation_deg=10.0, translation_range=(0.05, 0.15))
    return generate_scene_pair(3, params)


@pytest.fixture(scope="session")
def tiny_config():
    from topicmatch.model import MatcherConfig

    return MatcherConfig(
        num_topics=8,
        num_covisible=4,
        backbone_widths=(8, 16, 32),
        fine_dim=16,
        attention_heads=4,
    )
