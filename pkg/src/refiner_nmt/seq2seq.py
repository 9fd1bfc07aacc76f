"""Attention encoder-decoder building blocks.

All functions are batch-major: source states are ``(B, J, d_h)``, decoder states
``(B, d_s)``. A single sentence is a batch of one.

Gated recurrent cell convention (update gate mixes in the candidate)::

    r, z = sigmoid(x W_rz + h U_rz + b_rz)
    cand = tanh(x W_c + (r * h) U_c + b_c)
    h'   = (1 - z) * h + z * cand
"""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Named parameters. Each tensor draws from its own name-keyed RNG stream, so
    adding or removing a parameter group never changes the values of the others."""

    def __init__(self, seed: int = 1, scale: float = 0.08):
        self.seed = seed
        self.scale = scale
        self.params: dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])

    def weight(self, name: str, shape: tuple[int, ...]) -> Tensor:
        data = self._rng(name).uniform(-self.scale, self.scale, size=shape)
        return self._add(name, data)

    def bias(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self._add(name, np.zeros(shape))

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = T.parameter(data, name=name)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def values(self):
        return self.params.values()

    def items(self):
        return self.params.items()

    def count(self, prefix: str = "") -> int:
        return sum(p.data.size for n, p in self.params.items() if n.startswith(prefix))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, p in self.params.items():
            if arrays[n].shape != p.data.shape:
                raise ValueError(f"{n}: shape {arrays[n].shape} != {p.data.shape}")
            p.data = np.array(arrays[n], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)


# -- gated recurrent unit ---------------------------------------------------------


def add_gru(store: ParamStore, prefix: str, d_in: int, d_hid: int) -> None:
    store.weight(f"{prefix}.W", (d_in, 3 * d_hid))
    store.bias(f"{prefix}.b", (3 * d_hid,))
    store.weight(f"{prefix}.U_rz", (d_hid, 2 * d_hid))
    store.weight(f"{prefix}.U_c", (d_hid, d_hid))


def gru_param_count(d_in: int, d_hid: int) -> int:
    return d_in * 3 * d_hid + 3 * d_hid + 3 * d_hid * d_hid


def gru_cell(x_rz: Tensor, x_c: Tensor, h: Tensor, U_rz: Tensor, U_c: Tensor, step_mask=None) -> Tensor:
    """One transition given the already-projected input pieces.

    ``step_mask`` (``(B, 1)`` array of 0/1) freezes the state of padded rows.
    """
    H = h.shape[-1]
    r, z = T.split(T.sigmoid(x_rz + h @ U_rz), (H, H))
    cand = T.tanh(x_c + (r * h) @ U_c)
    if step_mask is not None:
        z = z * step_mask
    return h + z * (cand - h)


def run_gru(
    store: ParamStore,
    prefix: str,
    x: Tensor,
    mask: np.ndarray | None = None,
    reverse: bool = False,
    h0: Tensor | None = None,
) -> list[Tensor]:
    """Run over ``x`` of shape ``(B, J, d_in)``; returns per-position states in position order."""
    B, J, _ = x.shape
    U_rz, U_c = store[f"{prefix}.U_rz"], store[f"{prefix}.U_c"]
    H = U_c.shape[0]
    proj = x @ store[f"{prefix}.W"] + store[f"{prefix}.b"]
    x_rz, x_c = T.split(proj, (2 * H, H))
    x_rz, x_c = T.unstack(x_rz, axis=1), T.unstack(x_c, axis=1)
    h = h0 if h0 is not None else Tensor(np.zeros((B, H)))
    out: list[Tensor | None] = [None] * J
    for t in reversed(range(J)) if reverse else range(J):
        m = None
        if mask is not None and not mask[:, t].all():
            m = mask[:, t : t + 1]
        h = gru_cell(x_rz[t], x_c[t], h, U_rz, U_c, m)
        out[t] = h
    return out


def add_birnn(store: ParamStore, prefix: str, d_in: int, d_hid: int) -> None:
    add_gru(store, f"{prefix}.fwd", d_in, d_hid)
    add_gru(store, f"{prefix}.bwd", d_in, d_hid)


def birnn(store: ParamStore, prefix: str, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Bidirectional GRU, ``(B, J, d_in)`` to ``(B, J, 2 d_hid)``.

    Both directions advance together: the backward direction reads the
    time-reversed input, and the two states are stacked on a leading axis so
    each position pair costs one set of batched ops. The result equals running
    :func:`run_gru` forward and in reverse.
    """
    B, J, _ = x.shape
    f, b = f"{prefix}.fwd", f"{prefix}.bwd"
    H = store[f"{f}.U_c"].shape[0]
    W = T.reshape(T.stack([store[f"{f}.W"], store[f"{b}.W"]]), (2, 1) + store[f"{f}.W"].shape)
    bias = T.reshape(T.stack([store[f"{f}.b"], store[f"{b}.b"]]), (2, 1, 1, 3 * H))
    U_rz = T.stack([store[f"{f}.U_rz"], store[f"{b}.U_rz"]])
    U_c = T.stack([store[f"{f}.U_c"], store[f"{b}.U_c"]])
    proj = T.stack([x, x[:, ::-1]]) @ W + bias  # (2, B, J, 3H)
    x_rz, x_c = T.split(proj, (2 * H, H))
    x_rz, x_c = T.unstack(x_rz, axis=2), T.unstack(x_c, axis=2)
    both = None if mask is None else np.stack([mask, mask[:, ::-1]])[..., None]  # (2, B, J, 1)
    h = Tensor(np.zeros((2, B, H)))
    out = []
    for t in range(J):
        m = None
        if both is not None and not both[:, :, t].all():
            m = both[:, :, t]
        h = gru_cell(x_rz[t], x_c[t], h, U_rz, U_c, m)
        out.append(h)
    fwd, bwd = T.unstack(T.stack(out, axis=2), axis=0)
    return T.concat([fwd, bwd[:, ::-1]])


# -- parameters of the baseline ---------------------------------------------------


def add_core_params(store: ParamStore, cfg) -> None:
    E, R, S, A, O, Dh = cfg.d_emb, cfg.d_rnn, cfg.d_dec, cfg.d_att, cfg.d_out, cfg.d_h
    store.weight("enc.emb", (cfg.src_vocab_size, E))
    add_birnn(store, "enc", E, R)
    if cfg.variant == "multi-layer":
        add_gru(store, "enc.l2", Dh, Dh)
    store.weight("dec.init.W", (R, S))
    store.bias("dec.init.b", (S,))
    store.weight("att.W", (S, A))
    store.weight("att.U", (Dh, A))
    store.weight("att.v", (A, 1))
    store.weight("dec.emb", (cfg.tgt_vocab_size, E))
    store.weight("dec.gru.W_e", (E, 3 * S))
    store.weight("dec.gru.W_c", (Dh, 3 * S))
    store.bias("dec.gru.b", (3 * S,))
    store.weight("dec.gru.U_rz", (S, 2 * S))
    store.weight("dec.gru.U_c", (S, S))
    store.weight("out.W_t", (S + E + Dh, O))
    store.bias("out.b_t", (O,))
    store.weight("out.W_o", (O, cfg.tgt_vocab_size))
    store.bias("out.b_o", (cfg.tgt_vocab_size,))


def core_param_count(cfg) -> int:
    E, R, S, A, O, Dh = cfg.d_emb, cfg.d_rnn, cfg.d_dec, cfg.d_att, cfg.d_out, cfg.d_h
    n = cfg.src_vocab_size * E + 2 * gru_param_count(E, R)
    n += R * S + S
    n += S * A + Dh * A + A
    n += cfg.tgt_vocab_size * E + gru_param_count(E + Dh, S)
    n += (S + E + Dh) * O + O + O * cfg.tgt_vocab_size + cfg.tgt_vocab_size
    if cfg.variant == "multi-layer":
        n += gru_param_count(Dh, Dh)
    return n


# -- operations --------------------------------------------------------------------


def encode(store: ParamStore, ids: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Source ids ``(B, J)`` to states ``(B, J, 2 d_rnn)``: forward and backward halves concatenated."""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    if ids.shape[1] < 1:
        raise ValueError("encode: empty source sequence")
    h = birnn(store, "enc", T.embedding(store["enc.emb"], ids), mask)
    if "enc.l2.W" in store:
        h = h + T.stack(run_gru(store, "enc.l2", h, mask), axis=1)
    return h


def init_decoder_state(store: ParamStore, h: Tensor) -> Tensor:
    """tanh projection of the backward encoder state at the first source position."""
    R = store["dec.init.W"].shape[0]
    return T.tanh(h[:, 0, R:] @ store["dec.init.W"] + store["dec.init.b"])


def attention_keys(store: ParamStore, states: Tensor) -> Tensor:
    return states @ store["att.U"]


def attend(
    store: ParamStore,
    s_prev: Tensor,
    states: Tensor,
    keys: Tensor | None = None,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Additive attention ``e_j = v . tanh(W s_prev + U h_j)``; returns (context, weights)."""
    B, J, D = states.shape
    if keys is None:
        keys = attention_keys(store, states)
    query = T.reshape(s_prev @ store["att.W"], (B, 1, -1))
    scores = T.reshape(T.tanh(keys + query) @ store["att.v"], (B, J))
    if mask is not None and not mask.all():
        # the product pins padded weights to exact zeros instead of the softmax floor
        alpha = T.softmax(scores + (mask - 1.0) * 1e30) * mask
    else:
        alpha = T.softmax(scores)
    context = T.reshape(T.reshape(alpha, (B, 1, J)) @ states, (B, D))
    return context, alpha


def embed_targets(store: ParamStore, ids: np.ndarray) -> Tensor:
    return T.embedding(store["dec.emb"], np.atleast_1d(ids))


def decoder_input_proj(store: ParamStore, y_emb: Tensor) -> Tensor:
    """The part of the decoder's input projection that depends only on the previous word."""
    return y_emb @ store["dec.gru.W_e"] + store["dec.gru.b"]


def decoder_step(
    store: ParamStore,
    y_emb: Tensor,
    s_prev: Tensor,
    context: Tensor,
    emb_proj: Tensor | None = None,
) -> Tensor:
    S = s_prev.shape[-1]
    if emb_proj is None:
        emb_proj = decoder_input_proj(store, y_emb)
    x_rz, x_c = T.split(emb_proj + context @ store["dec.gru.W_c"], (2 * S, S))
    return gru_cell(x_rz, x_c, s_prev, store["dec.gru.U_rz"], store["dec.gru.U_c"])


def output_logits(
    store: ParamStore,
    s: Tensor,
    y_emb: Tensor,
    context: Tensor,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
) -> Tensor:
    hidden = T.tanh(T.concat([s, y_emb, context]) @ store["out.W_t"] + store["out.b_t"])
    hidden = T.dropout(hidden, dropout, rng, training)
    return hidden @ store["out.W_o"] + store["out.b_o"]


def predict(store: ParamStore, s: Tensor, y_emb: Tensor, context: Tensor, **kw) -> Tensor:
    """Distribution over the target vocabulary for the next word."""
    return T.softmax(output_logits(store, s, y_emb, context, **kw))
