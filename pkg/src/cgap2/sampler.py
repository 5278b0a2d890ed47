"""Context/gap window sampling.

A window takes ``n`` input frames at stride ``g`` starting from ``j``,
and predicts the ``k`` frames that continue the same stride past the
last input: targets start at j + n*g.
"""

from __future__ import annotations

from dataclasses import dataclass, field


class WindowError(ValueError):
    """Sequence too short for the requested window."""

    def __init__(self, message, required_length):
        super().__init__(message)
        self.required_length = required_length


@dataclass(frozen=True)
class SamplerConfig:
    context_n: int = 5
    gap_g: int = 15
    k_value: int = 1
    start_j: int = 0

    def __post_init__(self):
        if self.context_n < 1 or self.gap_g < 1 or self.k_value < 1:
            raise ValueError("context_n, gap_g and k_value must be positive")
        if self.start_j < 0:
            raise ValueError("start_j must be non-negative")

    def required_length(self, start_j=None):
        """Minimal sequence length fitting a window at ``start_j``."""
        j = self.start_j if start_j is None else start_j
        return j + (self.context_n + self.k_value - 1) * self.gap_g + 1


@dataclass(frozen=True)
class WindowSample:
    input_indices: tuple
    target_indices: tuple
    sequence_id: str = ""

    @property
    def start_j(self):
        return self.input_indices[0]


def sample_window(config: SamplerConfig, sequence_length: int, start_j=None,
                  sequence_id="") -> WindowSample:
    """Build the window anchored at ``start_j`` (default: config.start_j)."""
    j = config.start_j if start_j is None else start_j
    n, g, k = config.context_n, config.gap_g, config.k_value
    need = config.required_length(j)
    if sequence_length < need:
        raise WindowError(
            f"sequence of length {sequence_length} cannot fit window "
            f"(n={n}, g={g}, k={k}, j={j}); needs {need} frames", need)
    inputs = tuple(j + i * g for i in range(n))
    targets = tuple(j + (n + i) * g for i in range(k))
    return WindowSample(inputs, targets, sequence_id)


def enumerate_windows(config: SamplerConfig, sequence_length: int, hop=1,
                      sequence_id="") -> list:
    """All valid windows with start_j in {0, hop, 2*hop, ...}, in
    increasing start order; empty when none fit."""
    if hop < 1:
        raise ValueError("hop must be >= 1")
    windows = []
    j = 0
    while config.required_length(j) <= sequence_length:
        windows.append(sample_window(config, sequence_length, start_j=j,
                                     sequence_id=sequence_id))
        j += hop
    return windows
