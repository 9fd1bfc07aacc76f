"""Toy models and batches shared by the unit and acceptance tests."""

import numpy as np

from refiner_nmt import policy as pol
from refiner_nmt.config import ModelConfig
from refiner_nmt.data import collate
from refiner_nmt.gradcheck import grad_check_params
from refiner_nmt.model import RefinerNMT
from refiner_nmt.training import nll_loss

TOY_VOCAB = 9
GRAD_VARIANTS = ("baseline", "multi-layer", "shallow", "deep", "hard-shallow", "hard-deep", "conditional")


def toy_model(variant: str, d: int = 8, vocab: int = TOY_VOCAB, seed: int = 3, **kw) -> RefinerNMT:
    cfg = ModelConfig(
        vocab, vocab, variant=variant, d_emb=d, d_rnn=d, d_dec=d, d_att=d, d_out=d, d_policy=d, seed=seed, **kw
    )
    return RefinerNMT(cfg)


def toy_batch(lengths=((5, 4), (3, 2)), vocab: int = TOY_VOCAB, seed: int = 0):
    """A padded batch; each (J, n) pair gives source length J and target length n (+EOS)."""
    rng = np.random.default_rng(seed)
    pairs = [(list(rng.integers(4, vocab, size=j)), list(rng.integers(4, vocab, size=n))) for j, n in lengths]
    return collate(pairs, range(len(pairs)))


def composed_loss(model: RefinerNMT, batch, alpha: float = 0.3, tau: float = 0.7, noise_seed: int = 11):
    """NLL plus refine penalty with dropout and Gumbel noise drawn from a fixed seed.

    The conditional variant mixes states with the relaxed sample, so the loss
    is differentiable and central differences are a valid oracle.
    """
    rng = np.random.default_rng(noise_seed)
    res = model.forward(
        batch.src, batch.src_mask, batch.tgt_in, training=True, rng=rng, tau=tau, straight_through=False
    )
    loss = nll_loss(res.probs, batch.tgt_out, batch.tgt_mask)
    if model.conditional:
        from refiner_nmt import tensor as T

        loss = loss + pol.refine_penalty(T.concat(res.refine_flags), alpha, batch.tgt_mask)
    return loss


def full_model_grad_errors(variant: str, max_coords: int = 8, epsilon: float = 1e-4) -> dict[str, float]:
    """Per-parameter max relative error of the composed loss.

    Weights are drawn at unit scale: at the training init scale many gradients
    are ~1e-9 and central differences are then dominated by roundoff.
    """
    model = toy_model(variant, init_scale=1.0)
    batch = toy_batch()
    return grad_check_params(
        lambda: composed_loss(model, batch), model.parameters(), epsilon, max_coords, np.random.default_rng(5)
    )


# -- one grad-check case per registered op ---------------------------------------------


def _r(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


def _proj(y, seed=99):
    from refiner_nmt import tensor as T

    return T.sum_(y * np.random.default_rng(seed).normal(size=y.shape))


def op_cases():
    """(op kind, scalar function, point) for every differentiable op in the registry.

    ``straight_through`` is absent: its backward is the identity by definition,
    which no finite difference reproduces; its contract is tested directly.
    """
    from refiner_nmt import tensor as T

    ids = np.array([[0, 2, 2], [1, 0, 3]])
    return [
        ("add", lambda x: _proj(x + _r(1, 4, seed=1)), _r(3, 4)),
        ("sub", lambda x: _proj(_r(3, 4, seed=1) - x), _r(4)),
        ("mul", lambda x: _proj(x * _r(3, 1, seed=1)), _r(3, 4)),
        ("neg", lambda x: _proj(-x), _r(3, 4)),
        ("matmul", lambda x: _proj(x @ _r(4, 5, seed=1)), _r(2, 3, 4)),
        ("sigmoid", lambda x: _proj(T.sigmoid(x)), _r(3, 4)),
        ("tanh", lambda x: _proj(T.tanh(x)), _r(3, 4)),
        ("exp", lambda x: _proj(T.exp(x)), _r(3, 4)),
        ("log", lambda x: _proj(T.log(x)), np.abs(_r(3, 4)) + 0.5),
        ("softmax", lambda x: _proj(T.softmax(x)), _r(3, 4)),
        ("concat", lambda x: _proj(T.concat([x, x * 2.0])), _r(3, 4)),
        ("split", lambda x: _proj(T.split(x, (1, 3))[1]), _r(3, 4)),
        ("stack", lambda x: _proj(T.stack([x, T.tanh(x)], axis=1)), _r(3, 4)),
        ("unstack", lambda x: _proj(T.unstack(x, axis=1)[1]), _r(2, 3, 4)),
        ("slice", lambda x: _proj(x[:, 1:3]), _r(3, 4)),
        ("reshape", lambda x: _proj(T.reshape(x, (4, 3))), _r(3, 4)),
        ("embedding", lambda x: _proj(T.embedding(x, ids)), _r(4, 3)),
        ("gather", lambda x: _proj(T.gather(x, ids)), _r(2, 3, 4)),
        ("dropout", lambda x: _proj(T.dropout(x, 0.3, np.random.default_rng(2), True)), _r(3, 4)),
        ("sum", lambda x: _proj(T.sum_(x * x, axis=1)), _r(3, 4)),
        ("mean", lambda x: _proj(T.mean(x * x, axis=0, keepdims=True)), _r(3, 4)),
    ]
