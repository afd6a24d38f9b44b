"""Shared test utilities: a tiny model, loss closures and a finite-difference oracle."""
import numpy as np
import torch

from streamdisfl.encoder import EncoderConfig, StreamingTagger, forward
from streamdisfl.objective import LossConfig, total_loss

TINY = EncoderConfig(vocab_size=11, max_len=6, d_model=8, n_layers=1, n_heads=2, d_ff=16,
                     dropout_rate=0.0, seed=3)


def tiny_model(seed=3, **overrides):
    from dataclasses import replace

    return StreamingTagger(replace(TINY, seed=seed, **overrides))


def example_loss(model, token_ids, labels, config: LossConfig):
    """Total loss built from independent per-prefix forward passes."""
    outputs = [forward(model, token_ids[:i]) for i in range(1, len(token_ids) + 1)]
    return total_loss(outputs, labels, config)


def central_differences(model, loss_fn, step=1e-5):
    """Numerical gradient of loss_fn(model) w.r.t. every parameter, one entry at a time."""
    grads = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            g = np.zeros(p.shape)
            flat = p.view(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + step
                up = float(loss_fn(model))
                flat[idx] = orig - step
                down = float(loss_fn(model))
                flat[idx] = orig
                g.reshape(-1)[idx] = (up - down) / (2 * step)
            grads[name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
