"""Graph-memory accounting for recorded tape nodes."""

from contextvars import ContextVar
from typing import Optional


class GraphBudgetExceeded(MemoryError):
    """Raised when recorded graph bytes exceed a meter's cap."""


class MemoryMeter:
    """Counts bytes held by live tape nodes.

    Only node payloads (outputs and saved operands) are counted; leaves such
    as model parameters and detached trajectory states are not.

    A meter becomes the default for tapes created inside ``with meter:``.
    """

    def __init__(self, cap_bytes: Optional[int] = None):
        self.cap_bytes = cap_bytes
        self.current_bytes = 0
        self.peak_bytes = 0
        self.live_node_count = 0
        self._token = None

    def allocate(self, nbytes: int) -> None:
        self.current_bytes += nbytes
        self.live_node_count += 1
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes
        if self.cap_bytes is not None and self.current_bytes > self.cap_bytes:
            raise GraphBudgetExceeded(
                f"graph memory {self.current_bytes} B exceeds cap {self.cap_bytes} B"
            )

    def free(self, nbytes: int) -> None:
        self.current_bytes -= nbytes
        self.live_node_count -= 1

    def reset(self) -> None:
        self.current_bytes = 0
        self.peak_bytes = 0
        self.live_node_count = 0

    def __enter__(self):
        self._token = _active_meter.set(self)
        return self

    def __exit__(self, *exc):
        _active_meter.reset(self._token)
        self._token = None
        return False

    def __repr__(self):
        return (
            f"MemoryMeter(current={self.current_bytes}, peak={self.peak_bytes}, "
            f"nodes={self.live_node_count})"
        )


_default_meter = MemoryMeter()
_active_meter: ContextVar[Optional[MemoryMeter]] = ContextVar("purigrad_meter", default=None)


def current_meter() -> MemoryMeter:
    meter = _active_meter.get()
    return meter if meter is not None else _default_meter
