"""Shared test utilities: toy tasks and plain training loops."""

import numpy as np

from stdinet.data import SampleWindow, windows_to_arrays
from stdinet.model import TOY_DIMS
from stdinet.tensor import Tape, Tensor
from stdinet.training import Adam, mse_loss


def copy_task_windows(n=20, dims=TOY_DIMS, seed=0):
    """Windows whose target is a copy of the last input frame.

    Counts are 0/1: the generated prediction weights have rank at most
    ``rank`` (4 at toy dims) against 8 outputs, so larger-magnitude random
    frames cannot be memorized exactly by construction.
    """
    rng = np.random.default_rng(seed)
    windows = []
    for i in range(n):
        inputs = rng.integers(0, 2, size=(dims.seq_len, 2, dims.rows, dims.cols)).astype(np.float32)
        windows.append(SampleWindow(
            inputs=inputs, target=inputs[-1].copy(), hour=i % 24,
            target_index=i + dims.seq_len, target_epoch=(i + dims.seq_len) * 3600,
            interval_seconds=3600,
        ))
    return windows


def memorize_windows(n, seed, dims=TOY_DIMS):
    """Arbitrary (window -> positive frame) pairs for memorization tests."""
    rng = np.random.default_rng(seed)
    windows = []
    for i in range(n):
        inputs = rng.integers(0, 5, size=(dims.seq_len, 2, dims.rows, dims.cols)).astype(np.float32)
        target = rng.integers(1, 4, size=(2, dims.rows, dims.cols)).astype(np.float32)
        windows.append(SampleWindow(
            inputs=inputs, target=target, hour=i % 24,
            target_index=i + dims.seq_len, target_epoch=(i + dims.seq_len) * 3600,
            interval_seconds=3600,
        ))
    return windows


def manual_steps(model, windows, steps, lr=1e-3, weight_decay=0.0, stop_below=None):
    """Full-batch train-mode loop; optionally stop once the loss crosses a bar."""
    inputs, hours, targets = windows_to_arrays(windows)
    tape = Tape()
    model.attach_tape(tape)
    adam = Adam(model.parameters(), lr=lr, weight_decay=weight_decay)
    losses = []
    for _ in range(steps):
        tape.reset()
        loss = mse_loss(model.forward_batch(Tensor(inputs), hours, mode="train"),
                        Tensor(targets))
        losses.append(loss.item())
        if stop_below is not None and losses[-1] < stop_below:
            break
        tape.backward(loss)
        adam.step()
        adam.zero_grad()
    return losses
