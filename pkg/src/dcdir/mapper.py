"""Source-to-target feature mapping: a d -> 2d -> d tanh MLP.

``layers=1`` gives a single affine map, used in tests.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Var


class MlpMapper:
    def __init__(self, dim: int, rng: np.random.Generator | None = None, hidden: int | None = None,
                 layers: int = 2):
        if layers not in (1, 2):
            raise ad.ConfigError(f"layers must be 1 or 2, got {layers}")
        hidden = dim if layers == 1 else (hidden or 2 * dim)
        self.dim = dim
        self.layers = layers

        def init(shape, fan_in):
            if rng is None:
                return np.zeros(shape)
            bound = np.sqrt(6.0 / (fan_in + shape[0]))
            return rng.uniform(-bound, bound, shape)

        self.W1 = Parameter("mlp.W1", init((hidden, dim), dim))
        self.b1 = Parameter("mlp.b1", np.zeros(hidden))
        if layers == 2:
            self.W2 = Parameter("mlp.W2", init((dim, hidden), hidden))
            self.b2 = Parameter("mlp.b2", np.zeros(dim))

    @classmethod
    def identity(cls, dim: int) -> "MlpMapper":
        m = cls(dim, layers=1)
        m.W1.value[...] = np.eye(dim)
        return m

    def parameters(self):
        if self.layers == 1:
            return [self.W1, self.b1]
        return [self.W1, self.b1, self.W2, self.b2]

    def on_tape(self, u_s: Var, keep_prob: float = 1.0, rng=None, training: bool = False) -> Var:
        tape = u_s.tape
        if self.layers == 1:
            return ad.affine(tape.param(self.W1), u_s, tape.param(self.b1))
        hidden = ad.tanh(ad.affine(tape.param(self.W1), u_s, tape.param(self.b1)))
        hidden = ad.dropout(hidden, keep_prob, rng, training)
        return ad.affine(tape.param(self.W2), hidden, tape.param(self.b2))


def map_feature(m: MlpMapper, u_s) -> np.ndarray:
    tape = Tape(record=False)
    u_s = np.asarray(u_s, dtype=float)
    if u_s.shape[-1] != m.dim:
        raise ad.DimensionError(f"map_feature: expected dim {m.dim}, got {u_s.shape}")
    return m.on_tape(tape.const(u_s)).value


def cross_loss_on_tape(tape: Tape, m: MlpMapper, u_s, u_t, **dropout) -> Var:
    """Sum of squared distances ``|f(u_s) - u_t|^2``.

    Both features enter as constants, so only the mapper receives gradient
    from this term. ``u_s``/``u_t`` are arrays or Vars (values are taken).
    """
    us = tape.const(u_s.value if isinstance(u_s, Var) else u_s)
    ut = tape.const(u_t.value if isinstance(u_t, Var) else u_t)
    return ad.total(ad.sq_norm(ad.sub(m.on_tape(us, **dropout), ut)))


def cross_loss(m: MlpMapper, pairs, tape: Tape | None = None) -> Var | float:
    """Mapping loss over ``(u_s, u_t)`` pairs.

    Without a tape the value is returned as a float; with one, the loss Var is
    returned ready for ``tape.backward``.
    """
    if not pairs:
        raise ValueError("cross_loss needs at least one pair")
    us = np.stack([np.asarray(p[0], dtype=float) for p in pairs])
    ut = np.stack([np.asarray(p[1], dtype=float) for p in pairs])
    if us.shape != ut.shape:
        raise ad.DimensionError(f"cross_loss: {us.shape} vs {ut.shape}")
    t = tape or Tape(record=False)
    loss = cross_loss_on_tape(t, m, us, ut)
    return loss if tape is not None else float(loss.value)
