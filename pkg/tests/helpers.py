"""Shared test utilities: finite-difference gradient checking."""

import numpy as np

from moemix.moe_core import MoENetwork, backward, forward_loss


def loss_fn(network: MoENetwork, tokens, train_mode=False, noise_seed=None) -> float:
    """Total loss under a re-seedable noise stream so FD re-runs are exact."""
    rng = np.random.default_rng(noise_seed) if noise_seed is not None else None
    return forward_loss(network, tokens, train_mode=train_mode, rng=rng).total_loss


def relative_error(a: float, f: float) -> float:
    # Relative where the gradient is measurable, absolute below 1e-3 so
    # finite-difference noise on near-zero entries cannot dominate.
    return abs(a - f) / max(abs(a), abs(f), 1e-3)


def gradcheck(
    network: MoENetwork,
    tokens,
    eps: float = 1e-4,
    train_mode: bool = False,
    noise_seed: int | None = None,
    param_filter=None,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(noise_seed) if noise_seed is not None else None
    result = forward_loss(network, tokens, train_mode=train_mode, rng=rng)
    grads = backward(network, result)
    worst = 0.0
    for name, param in network.params.items():
        if param_filter is not None and not param_filter(name):
            continue
        grad = grads[name]
        it = np.nditer(param, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = param[idx]
            param[idx] = orig + eps
            up = loss_fn(network, tokens, train_mode, noise_seed)
            param[idx] = orig - eps
            down = loss_fn(network, tokens, train_mode, noise_seed)
            param[idx] = orig
            fd = (up - down) / (2.0 * eps)
            worst = max(worst, relative_error(grad[idx], fd))
    return worst
