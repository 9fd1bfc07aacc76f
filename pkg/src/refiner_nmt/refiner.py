"""Per-step refinement of source states conditioned on the decoder state.

Shallow refinement scales every source state by a sigmoid gate computed from
the state itself and the previous decoder state. Deep refinement re-encodes the
gated states with a second bidirectional recurrent encoder (own parameters,
vector inputs, no embeddings) and projects the result back to the source-state
width so attention sees the same dimensionality in every mode.

The hard-mask modes are the ablation in which the gate emits one scalar per
source position instead of a vector.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .seq2seq import ParamStore, add_birnn, birnn, gru_param_count
from .tensor import Tensor

MODES = ("shallow", "deep", "hard-shallow", "hard-deep")


def add_refiner_params(store: ParamStore, mode: str, d_h: int, d_s: int, d_re: int) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown refine mode {mode!r}; expected one of {MODES}")
    if mode.startswith("hard"):
        store.weight("ref.hard.w_h", (d_h, 1))
        store.weight("ref.hard.w_s", (d_s, 1))
        store.bias("ref.hard.b", (1,))
    else:
        store.weight("ref.gate.W", (d_h, d_h))
        store.weight("ref.gate.U", (d_s, d_h))
        store.bias("ref.gate.b", (d_h,))
    if mode.endswith("deep"):
        add_birnn(store, "ref.re", d_h, d_re)
        store.weight("ref.re.proj.W", (2 * d_re, d_h))
        store.bias("ref.re.proj.b", (d_h,))


def gate_param_count(d_h: int, d_s: int, hard: bool = False) -> int:
    return d_h + d_s + 1 if hard else d_h * d_h + d_s * d_h + d_h


def reencoder_param_count(d_h: int, d_re: int) -> int:
    return 2 * gru_param_count(d_h, d_re) + 2 * d_re * d_h + d_h


def refiner_param_count(mode: str, d_h: int, d_s: int, d_re: int) -> int:
    n = gate_param_count(d_h, d_s, hard=mode.startswith("hard"))
    if mode.endswith("deep"):
        n += reencoder_param_count(d_h, d_re)
    return n


def gate_precompute(store: ParamStore, h: Tensor, mode: str) -> Tensor:
    """The source-only half of the gate pre-activation; constant across decoding steps."""
    if mode.startswith("hard"):
        return h @ store["ref.hard.w_h"]
    return h @ store["ref.gate.W"]


def context_gate(store: ParamStore, h: Tensor, s_prev: Tensor, pre: Tensor | None = None) -> Tensor:
    """z_j = sigmoid(W h_j + U s_prev + b), shape ``(B, J, d_h)``."""
    B = h.shape[0]
    if pre is None:
        pre = h @ store["ref.gate.W"]
    target = T.reshape(s_prev @ store["ref.gate.U"] + store["ref.gate.b"], (B, 1, -1))
    return T.sigmoid(pre + target)


def hard_mask_gate(store: ParamStore, h: Tensor, s_prev: Tensor, pre: Tensor | None = None) -> Tensor:
    """One weight per source position, shape ``(B, J, 1)``."""
    B = h.shape[0]
    if pre is None:
        pre = h @ store["ref.hard.w_h"]
    target = T.reshape(s_prev @ store["ref.hard.w_s"] + store["ref.hard.b"], (B, 1, 1))
    return T.sigmoid(pre + target)


def shallow_refine(h: Tensor, z: Tensor) -> Tensor:
    return h * z


def deep_refine(store: ParamStore, h_bar: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Re-encode gated states; output keeps the input shape ``(B, J, d_h)``."""
    return birnn(store, "ref.re", h_bar, mask) @ store["ref.re.proj.W"] + store["ref.re.proj.b"]


def refine(
    store: ParamStore,
    h: Tensor,
    s_prev: Tensor,
    mode: str,
    mask: np.ndarray | None = None,
    pre: Tensor | None = None,
    gate_hook: Callable[[Tensor], Tensor] | None = None,
) -> tuple[Tensor, Tensor]:
    """States for attention at one decoding step, plus the gate that produced them.

    ``gate_hook`` may replace the gate before it is applied (used to probe saliency).
    """
    if mode not in MODES:
        raise ValueError(f"unknown refine mode {mode!r}; expected one of {MODES}")
    if mode.startswith("hard"):
        z = hard_mask_gate(store, h, s_prev, pre)
    else:
        z = context_gate(store, h, s_prev, pre)
    if gate_hook is not None:
        z = gate_hook(z)
    states = shallow_refine(h, z)
    if mode.endswith("deep"):
        states = deep_refine(store, states, mask)
    return states, z
