"""The encoder-refiner-decoder model and its variants.

``RefinerNMT.forward`` runs a teacher-forced pass over a padded batch (training,
validation, saliency). ``DecoderSession`` runs one sentence step by step for
search, refining lazily: a refine is only computed at a step that uses it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import policy as pol
from . import refiner as ref
from . import seq2seq as core
from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .config import ModelConfig
from .tensor import Tensor


@dataclass
class ForwardResult:
    probs: list[Tensor]
    alphas: list[Tensor]
    gates: list[Tensor | None]
    actions: np.ndarray  # (B, T) action realized at each step, 1 = REFINE
    pi: np.ndarray  # (B, T, 2) policy probabilities behind each action, NaN when forced
    logits: np.ndarray
    noise: np.ndarray
    relaxed: np.ndarray
    refine_flags: list[Tensor]  # (B, 1) per step; gradient path for the penalty
    tau: float = float("nan")

    def trace(self, b: int, length: int) -> pol.PolicyTrace:
        tr = pol.PolicyTrace()
        for i in range(length):
            forced = np.isnan(self.pi[b, i, 0])
            tr.append(
                self.actions[b, i],
                None if forced else self.pi[b, i],
                None if forced else self.logits[b, i],
                None if forced or np.isnan(self.noise[b, i, 0]) else self.noise[b, i],
                None if forced or np.isnan(self.relaxed[b, i, 0]) else self.relaxed[b, i],
                self.tau,
            )
        return tr


class RefinerNMT:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params = core.ParamStore(cfg.seed, cfg.init_scale)
        core.add_core_params(self.params, cfg)
        if cfg.refine_mode is not None:
            ref.add_refiner_params(self.params, cfg.refine_mode, cfg.d_h, cfg.d_dec, cfg.d_re)
        if cfg.variant == "conditional":
            pol.add_policy_params(self.params, cfg.d_dec + cfg.d_emb + cfg.d_h, cfg.d_policy)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    @property
    def mode(self) -> str | None:
        return self.cfg.refine_mode

    @property
    def conditional(self) -> bool:
        return self.cfg.variant == "conditional"

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params.items())

    def num_params(self) -> int:
        return self.params.count()

    def param_report(self) -> dict[str, int]:
        """Measured parameter counts per group next to the analytic formulas."""
        c = self.cfg
        rep = {"total": self.num_params(), "expected_total": expected_param_count(c)}
        rep["core"] = sum(p.data.size for n, p in self.params.items() if not n.startswith(("ref.", "pol.")))
        rep["expected_core"] = core.core_param_count(c)
        if self.mode:
            rep["refiner"] = self.params.count("ref.")
            rep["expected_refiner"] = ref.refiner_param_count(self.mode, c.d_h, c.d_dec, c.d_re)
            rep["gate"] = self.params.count("ref.gate.") + self.params.count("ref.hard.")
            rep["expected_gate"] = ref.gate_param_count(c.d_h, c.d_dec, hard=self.mode.startswith("hard"))
        if self.conditional:
            rep["policy"] = self.params.count("pol.")
            rep["expected_policy"] = pol.policy_param_count(c.d_dec + c.d_emb + c.d_h, c.d_policy)
        return rep

    # -- persistence --------------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        self.cfg.save(directory / "model.json")
        save_arrays(directory / "params.bin", self.params.arrays())

    @classmethod
    def load(cls, directory: str | Path) -> "RefinerNMT":
        directory = Path(directory)
        model = cls(ModelConfig.load(directory / "model.json"))
        model.params.load_arrays(load_arrays(directory / "params.bin"))
        return model

    # -- teacher-forced pass ------------------------------------------------------

    def session(self, src_ids, theta: float = 0.5, force_actions=None, **opts) -> "DecoderSession":
        return DecoderSession(self, src_ids, theta, force_actions, **opts)

    def _refiner(self, h: Tensor, mask: np.ndarray | None, gate_hook=None):
        pre = ref.gate_precompute(self.params, h, self.mode)

        def fresh(s_prev: Tensor, step: int, rows: np.ndarray | None = None):
            hook = None if gate_hook is None else (lambda z: gate_hook(step, z))
            if rows is None:
                return ref.refine(self.params, h, s_prev, self.mode, mask, pre, hook)
            sub_mask = None if mask is None else mask[rows]
            return ref.refine(
                self.params, Tensor(h.data[rows]), Tensor(s_prev.data[rows]), self.mode, sub_mask, Tensor(pre.data[rows])
            )

        return fresh

    def forward(
        self,
        src: np.ndarray,
        src_mask: np.ndarray | None,
        tgt_in: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
        tau: float = 1.0,
        theta: float = 0.5,
        force_actions: np.ndarray | None = None,
        gate_hook: Callable[[int, Tensor], Tensor] | None = None,
        straight_through: bool = True,
    ) -> ForwardResult:
        """Teacher-forced pass; ``tgt_in`` is BOS-framed, one column per decoding step.

        ``force_actions`` (``(B, T)`` of 0/1) overrides the policy of the conditional
        variant from step 1 on. ``gate_hook(step, z)`` may replace the gate at a step.
        With ``straight_through=False`` training mixes states with the relaxed
        sample itself, which makes the loss differentiable end to end.
        """
        P, cfg = self.params, self.cfg
        src = np.atleast_2d(src)
        tgt_in = np.atleast_2d(tgt_in)
        B, n_steps = tgt_in.shape
        mask = None if src_mask is None or src_mask.all() else src_mask
        if training and rng is None:
            raise ValueError("training forward needs an rng for dropout/noise")

        h = core.encode(P, src, mask)
        s = core.init_decoder_state(P, h)
        emb = core.embed_targets(P, tgt_in)
        emb_steps = T.unstack(emb, axis=1)
        proj_steps = T.unstack(core.decoder_input_proj(P, emb), axis=1)

        nan = np.full((B, n_steps, 2), np.nan)
        res = ForwardResult([], [], [], np.zeros((B, n_steps), dtype=np.int64), nan.copy(), nan.copy(), nan.copy(), nan.copy(), [], tau)
        keys = None
        fresh = None
        if self.mode is None:
            keys = core.attention_keys(P, h)
            states = h
        else:
            fresh = self._refiner(h, mask, gate_hook)
            res.actions[:] = 1
        eager = training or T.active_graph() is not None
        pending_gate = None
        if self.conditional:
            states, pending_gate = fresh(s, 0)
        flags = [Tensor(np.ones((B, 1)))]

        for i in range(n_steps):
            gate = None
            if self.mode is not None and not self.conditional:
                states, gate = fresh(s, i)
            elif self.conditional:
                gate = pending_gate
            c, alpha = core.attend(P, s, states, keys, mask)
            s_new = core.decoder_step(P, emb_steps[i], s, c, proj_steps[i])
            res.probs.append(
                core.predict(P, s_new, emb_steps[i], c, training=training, rng=rng, dropout=cfg.dropout)
            )
            res.alphas.append(alpha)
            res.gates.append(gate)
            if self.conditional and i + 1 < n_steps:
                states, pending_gate, flag = self._policy_step(
                    res, i + 1, s_new, emb_steps[i], c, states, fresh, training, rng, tau, theta, force_actions, eager,
                    straight_through,
                )
                flags.append(flag)
            s = s_new
        if self.conditional:
            res.refine_flags = flags
        return res

    def _policy_step(self, res, nxt, s_new, y_emb, c, states, fresh, training, rng, tau, theta, force, eager, st=True):
        P = self.params
        m = pol.policy_state(P, s_new, y_emb, c)
        o, pi = pol.policy_logits(P, m)
        res.pi[:, nxt] = pi.data
        res.logits[:, nxt] = o.data
        if force is not None:
            onehot = Tensor(pol.one_hot(force[:, nxt]))
        elif training:
            g = pol.sample_gumbel(rng, o.shape)
            relaxed = pol.gumbel_softmax(o, g, tau)
            onehot = pol.st_discretize(relaxed) if st else relaxed
            res.noise[:, nxt] = g
            res.relaxed[:, nxt] = relaxed.data
        else:
            onehot = Tensor(pol.one_hot(pol.decide(pi.data, theta)))
        res.actions[:, nxt] = (onehot.data.argmax(-1) == pol.REFINE).astype(np.int64)
        gate_box = []

        def build(rows):
            out, z = fresh(s_new, nxt, rows)
            gate_box.append(z)
            return out

        new_states = pol.mix_states(onehot, states, build, eager=eager)
        flag = T.split(onehot, (1, 1))[1]
        return new_states, (gate_box[0] if gate_box and eager else None), flag


def expected_param_count(cfg: ModelConfig) -> int:
    n = core.core_param_count(cfg)
    if cfg.refine_mode is not None:
        n += ref.refiner_param_count(cfg.refine_mode, cfg.d_h, cfg.d_dec, cfg.d_re)
    if cfg.variant == "conditional":
        n += pol.policy_param_count(cfg.d_dec + cfg.d_emb + cfg.d_h, cfg.d_policy)
    return n


# -- incremental decoding ---------------------------------------------------------


@dataclass(frozen=True)
class DecodeState:
    s: Tensor
    states: Tensor | None  # source states attended at the previous step
    keys: Tensor | None  # attention projection of ``states``, reused until the next refine
    pending: Tensor | None  # decoder state to refine from before the next step, if any
    step: int = 0
    actions: tuple[int, ...] = ()
    pis: tuple = ()  # policy probabilities behind each realized action (None if forced)
    next_pi: np.ndarray | None = None  # probabilities behind the pending decision
    alpha: np.ndarray | None = None  # attention weights of the step that produced this state

    def trace(self) -> pol.PolicyTrace:
        tr = pol.PolicyTrace()
        for a, p in zip(self.actions, self.pis):
            tr.append(a, p)
        return tr


class DecoderSession:
    """Inference over one source sentence; states are immutable so search can branch.

    For the conditional variant the policy decides after each step whether the
    next step refines. The refine itself runs at the start of the step that
    consumes it, so nothing is computed for a step that never happens.

    ``bypass_refiner`` decodes with the core network only, ignoring any refiner
    parameters. ``gate_hook(step, z)`` may replace the gate before it is applied.
    """

    def __init__(
        self,
        model: RefinerNMT,
        src_ids,
        theta: float = 0.5,
        force_actions=None,
        bypass_refiner: bool = False,
        gate_hook: Callable[[int, Tensor], Tensor] | None = None,
    ):
        self.model = model
        self.theta = theta
        self.force_actions = None if force_actions is None else np.asarray(force_actions, dtype=np.int64)
        self.mode = None if bypass_refiner else model.mode
        self.conditional = model.conditional and not bypass_refiner
        self.gate_hook = gate_hook
        self.refine_ops = 0
        P = model.params
        with T.no_grad():
            self.h = core.encode(P, np.asarray(src_ids, dtype=np.int64)[None, :])
            self.s0 = core.init_decoder_state(P, self.h)
            self.keys = core.attention_keys(P, self.h) if self.mode is None else None
            self.pre = ref.gate_precompute(P, self.h, self.mode) if self.mode is not None else None

    def initial_state(self) -> DecodeState:
        if self.mode is None:
            return DecodeState(self.s0, self.h, self.keys, None)
        return DecodeState(self.s0, None, None, self.s0)

    def _forced(self, step: int) -> int | None:
        if self.force_actions is None:
            return None
        return int(self.force_actions[min(step, len(self.force_actions) - 1)])

    def step(self, state: DecodeState, y_prev: int) -> tuple[np.ndarray, DecodeState]:
        """Log-probabilities of the next word and the successor state."""
        P = self.model.params
        with T.no_grad():
            refined = state.pending is not None
            if refined:
                hook = None if self.gate_hook is None else (lambda z: self.gate_hook(state.step, z))
                states, _ = ref.refine(P, self.h, state.pending, self.mode, None, self.pre, hook)
                keys = core.attention_keys(P, states)
                self.refine_ops += 1
            else:
                states, keys = state.states, state.keys
            c, alpha = core.attend(P, state.s, states, keys)
            e = core.embed_targets(P, np.array([y_prev]))
            s_new = core.decoder_step(P, e, state.s, c)
            probs = core.predict(P, s_new, e, c).data[0]
            pending, pi = None, None
            if self.conditional:
                _, pi_t = pol.policy_logits(P, pol.policy_state(P, s_new, e, c))
                pi = pi_t.data[0]
                forced = self._forced(state.step + 1)
                act = forced if forced is not None else int(pol.decide(pi, self.theta))
                pending = s_new if act == pol.REFINE else None
            elif self.mode is not None:
                pending = s_new
        nxt = DecodeState(
            s_new,
            states,
            keys,
            pending,
            state.step + 1,
            state.actions + (int(refined),),
            state.pis + (state.next_pi,),
            pi,
            alpha.data[0],
        )
        return np.log(probs), nxt
