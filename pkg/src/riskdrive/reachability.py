"""Learned barrier that tightens predicted obstacle distances.

A small net maps a (scaled) observation to a scalar b in [0, 1] via
sigmoid. During virtual rollouts the neighbor-distance channels of a
predicted next state are shrunk by

    b_bar = b * sigma_hat * |N(0,1)| * u3      (meters)
    d_adj = max(d - b_bar, 0)

so high model uncertainty plus a large learned factor carves a wider
safety margin around obstacles. The barrier trains to minimize the mean
potential risk of the adjusted states, with the Gaussian draw held fixed
per step so the gradient is an honest reparameterized derivative.
Adjustment only ever touches rollout predictions, never real
observations.
"""

from __future__ import annotations

import numpy as np

from .numkit import AdamState, DenseNet
from .worldmodel import ObsLayout

U3_DEFAULT = 5.0


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class BarrierPolicy:
    """State -> scalar tightening factor b in [0, 1]."""

    def __init__(self, obs_dim: int, layout: ObsLayout, hidden=(32, 32), u3: float = U3_DEFAULT,
                 lr: float = 1e-3, rng: np.random.Generator | None = None):
        self.layout = layout
        self.u3 = u3
        self.net = DenseNet.build([obs_dim, *hidden, 1], "tanh", rng)
        self.opt = AdamState(self.net.parameters(), lr)

    def factor(self, s) -> np.ndarray:
        """b = sigmoid(net(s)), batched to shape (B,)."""
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        return _sigmoid(self.net.forward(s)[:, 0])

    # -- distance adjustment -------------------------------------------------

    def _obstacle_mask(self, s_next: np.ndarray) -> np.ndarray:
        """Non-sentinel neighbor slots: predicted distance below the sensing cap."""
        lay = self.layout
        d = s_next[:, list(lay.d_indices)]
        return d < 200.0 / lay.d_scale - 1e-9

    def adjust_distances(self, b, sigma_hat, s_next, noise_abs) -> np.ndarray:
        """Apply d_adj = max(d - b*sigma_hat*|noise|*u3, 0) on obstacle slots.

        noise_abs: pre-drawn |N(0,1)| values, one per row. Distances live in
        the layout's scaled units; u3 is meters, hence the d_scale division.
        Non-distance components pass through bit-identical.
        """
        s_next = np.atleast_2d(np.asarray(s_next, dtype=np.float64))
        b = np.atleast_1d(np.asarray(b, dtype=np.float64))
        sigma_hat = np.atleast_1d(np.asarray(sigma_hat, dtype=np.float64))
        noise_abs = np.atleast_1d(np.asarray(noise_abs, dtype=np.float64))
        bbar = b * sigma_hat * noise_abs * (self.u3 / self.layout.d_scale)
        out = s_next.copy()
        idx = list(self.layout.d_indices)
        mask = self._obstacle_mask(s_next)
        adjusted = np.maximum(s_next[:, idx] - bbar[:, None], 0.0)
        out[:, idx] = np.where(mask, adjusted, s_next[:, idx])
        return out

    def adjust_batch(self, s_next, sigma_hat, rng: np.random.Generator) -> np.ndarray:
        """Rollout-facing wrapper: draws the noise and computes b itself."""
        s_next = np.atleast_2d(np.asarray(s_next, dtype=np.float64))
        noise = np.abs(rng.standard_normal(s_next.shape[0]))
        return self.adjust_distances(self.factor(s_next), sigma_hat, s_next, noise)

    # -- training -----------------------------------------------------------------

    def train_step(self, s_pred, sigma_hat, action_fn, model, rng: np.random.Generator) -> float:
        """One Adam step on L(psi) = mean f(adjusted(s_pred), a).

        s_pred: batch of predicted next states (rollout outputs, treated as
        constants). The actions come from action_fn at the *adjusted*
        states and are treated as constants too, so the only gradient path
        is psi -> b -> b_bar -> adjusted distances -> f. Returns the loss.
        """
        s_pred = np.atleast_2d(np.asarray(s_pred, dtype=np.float64))
        bsz = s_pred.shape[0]
        sigma_hat = np.atleast_1d(np.asarray(sigma_hat, dtype=np.float64))
        noise = np.abs(rng.standard_normal(bsz))

        raw, cache = self.net.forward_cached(s_pred)
        b = _sigmoid(raw[:, 0])
        adjusted = self.adjust_distances(b, sigma_hat, s_pred, noise)
        actions = np.atleast_2d(action_fn(adjusted))
        f, df_ds, _, _ = model.risk_input_grads(adjusted, actions)

        # chain back: only distance channels moved, and only where the
        # max() and obstacle mask keep the path alive
        idx = list(self.layout.d_indices)
        scale = sigma_hat * noise * (self.u3 / self.layout.d_scale)
        alive = self._obstacle_mask(s_pred) & (adjusted[:, idx] > 0.0)
        dL_db = -(df_ds[:, idx] * alive).sum(axis=1) * scale
        dL_draw = dL_db * b * (1.0 - b) / bsz
        grads, _ = self.net.backward(cache, dL_draw[:, None])
        self.opt.step(self.net.parameters(), grads)
        return float(np.mean(f))

    # -- persistence -----------------------------------------------------------------

    def to_networks(self) -> dict:
        return {"barrier/psi": self.net}

    def load_networks(self, nets: dict) -> None:
        self.net.load_from(nets["barrier/psi"])
