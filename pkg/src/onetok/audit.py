"""Operation audit hook: record every torch function an nn.Module forward
invokes, so structural claims ("this model is attention-free") can be asserted
instead of assumed.
"""

from dataclasses import dataclass
from typing import Any, Callable

import torch
from torch.overrides import TorchFunctionMode

# Ops whose presence marks a token-token attention product.
ATTENTION_OPS = {
    "softmax",
    "scaled_dot_product_attention",
    "matmul",
    "bmm",
    "baddbmm",
    "einsum",
}


@dataclass
class OpCall:
    name: str
    shapes: tuple


class OpAudit(TorchFunctionMode):
    """Context manager recording (op name, tensor-argument shapes) per call."""

    def __init__(self):
        super().__init__()
        self.calls: list[OpCall] = []

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        name = getattr(func, "__name__", str(func))
        shapes = tuple(tuple(a.shape) for a in args if isinstance(a, torch.Tensor))
        self.calls.append(OpCall(name=name, shapes=shapes))
        return func(*args, **kwargs)

    def op_names(self) -> set:
        return {c.name for c in self.calls}

    def signature(self) -> list:
        """Full (name, shapes) trace, usable as a cost fingerprint."""
        return [(c.name, c.shapes) for c in self.calls]


def record_ops(fn: Callable[[], Any]) -> OpAudit:
    """Run ``fn`` under an audit and return the populated recorder."""
    audit = OpAudit()
    with audit:
        fn()
    return audit
